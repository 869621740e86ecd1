#![no_main]

use libfuzzer_sys::fuzz_target;
use sweep_core::config::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ModelConfig::parse_str(text) {
        // accepted configs must survive a canonical round trip and build
        let again = ModelConfig::parse_str(&cfg.to_canonical_string()).expect("canonical form parses");
        assert_eq!(again, cfg);
        let _ = cfg.build();
    }
});
