#![no_main]

use libfuzzer_sys::fuzz_target;
use tgmtl::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        let json = cfg.canonical_json().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        let _ = cfg.scan_schedules();
    }
});
