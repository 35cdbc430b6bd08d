#![no_main]

use dnf_core::imageio;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = imageio::decode_gray(data) {
        if img.width() <= 256 && img.height() <= 256 {
            let png = imageio::encode_png(&img).unwrap();
            assert_eq!(imageio::decode_gray(&png).unwrap(), img);
        }
    }
});
