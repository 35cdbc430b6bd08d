#![no_main]

use dnf_core::{container, hash};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((dims, values)) = container::decode_f32(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(container::encode_f32(&dims, &values).unwrap(), data);
    }
    if let Ok(t) = container::decode(data) {
        let again = container::decode(&container::encode(&t).unwrap()).unwrap();
        assert_eq!(hash::tensor_hash(&t), hash::tensor_hash(&again));
    }
});
