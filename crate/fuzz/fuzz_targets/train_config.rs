#![no_main]

use ctcycle::train::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = TrainConfig::parse_toml(text) {
            assert!(TrainConfig::parse_toml(&cfg.to_toml()).is_ok());
        }
    }
});
