#![no_main]

use libfuzzer_sys::fuzz_target;
use mambamir::io::tensor_file::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode(data) {
        // anything that decodes re-encodes to the same bytes
        let back = encode(&t).expect("decoded tensors encode");
        assert_eq!(back.as_slice(), data);
    }
});
