#![no_main]

use libfuzzer_sys::fuzz_target;
use mambamir::io::checkpoint::{manifest_text, parse_manifest};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_manifest(text) {
            assert_eq!(parse_manifest(&manifest_text(&cfg)).expect("own output parses"), cfg);
        }
    }
});
