#![no_main]

use cuf_core::eval::{ColorSpace, HeadKind};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let _ = s.parse::<HeadKind>();
    let _ = s.parse::<ColorSpace>();
});
