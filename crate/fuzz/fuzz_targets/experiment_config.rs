//! Arbitrary bytes fed to the experiment-config JSON parser and validator.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = licfl::experiment::ExperimentConfig::from_json_str(s) {
            let _ = cfg.validate();
        }
    }
});
