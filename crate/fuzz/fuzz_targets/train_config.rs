#![no_main]

use libfuzzer_sys::fuzz_target;
use mambamir::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = TrainConfig::parse(text) {
            assert!(cfg.validate().is_ok());
        }
    }
});
