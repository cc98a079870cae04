#![no_main]

use cuf_core::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that parses must re-serialize to the same bytes.
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let again = ck.to_bytes();
        let back = Checkpoint::from_bytes(&again).expect("re-serialized checkpoint parses");
        assert_eq!(back.to_bytes(), again);
    }
});
