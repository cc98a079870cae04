#![no_main]

use cuf_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json(text) {
        let _ = cfg.validate();
        let round = RunConfig::from_json(&cfg.to_json()).expect("effective config reloads");
        assert_eq!(round, cfg);
    }
});
