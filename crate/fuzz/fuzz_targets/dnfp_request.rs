#![no_main]

use dnf_core::{hash, protocol};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = protocol::decode_request(data) {
        let again = protocol::decode_request(&protocol::encode_request(&req).unwrap()).unwrap();
        assert_eq!(req.t, again.t);
        assert_eq!(hash::tensor_hash(&req.x), hash::tensor_hash(&again.x));
    }
    let _ = protocol::read_request(data);
});
