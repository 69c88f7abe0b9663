#![no_main]

use libfuzzer_sys::fuzz_target;
use restore_core::io::rawtensor::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode(data) {
        for t in &tensors {
            assert_eq!(t.data().len(), t.shape().numel());
        }
        // Whatever decodes must re-encode to the same bytes.
        assert_eq!(encode(&tensors), data);
    }
});
