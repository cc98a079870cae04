#![no_main]

use cuf_core::imaging::{decode_png, encode_png};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        if img.height() > 0 && img.width() > 0 {
            let bytes = encode_png(&img).expect("decoded image encodes");
            assert_eq!(decode_png(&bytes).expect("round trip").tensor(), img.tensor());
        }
    }
});
