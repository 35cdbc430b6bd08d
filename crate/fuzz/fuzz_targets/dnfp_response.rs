#![no_main]

use dnf_core::protocol::{self, Response};
use dnf_core::hash;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(resp) = protocol::decode_response(data) {
        let again = protocol::decode_response(&protocol::encode_response(&resp).unwrap()).unwrap();
        match (&resp, &again) {
            (Response::Ok(a), Response::Ok(b)) => assert_eq!(hash::tensor_hash(a), hash::tensor_hash(b)),
            (Response::Err(a), Response::Err(b)) => assert_eq!(a, b),
            _ => panic!("status changed on re-encoding"),
        }
    }
    let _ = protocol::read_response(data);
});
