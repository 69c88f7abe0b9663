#![no_main]

use libfuzzer_sys::fuzz_target;
use restore_core::io::manifest::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = Manifest::parse(text) {
        assert!(!m.pairs.is_empty());
        assert_eq!(Manifest::parse(&m.to_text()).expect("round trip"), m);
    }
});
