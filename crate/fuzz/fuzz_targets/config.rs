#![no_main]

use libfuzzer_sys::fuzz_target;
use specrec::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let resolved = cfg.to_text();
        assert_eq!(RunConfig::parse(&resolved).expect("resolved text parses"), cfg);
    }
});
