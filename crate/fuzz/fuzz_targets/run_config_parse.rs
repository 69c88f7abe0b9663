#![no_main]

use libfuzzer_sys::fuzz_target;
use restore_core::io::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        cfg.validate().expect("parsed configs are valid");
        assert_eq!(RunConfig::parse(&cfg.to_text()).expect("round trip"), cfg);
    }
});
