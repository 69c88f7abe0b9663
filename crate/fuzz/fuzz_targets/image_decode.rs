#![no_main]

use libfuzzer_sys::fuzz_target;
use restore_core::io::image::decode_image;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_image(data) {
        assert_eq!(t.shape().channels(), 3);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
