//! Telemetry CSV parsing must never panic, only return errors.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = licfl::data::parse_telemetry_csv(data);
});
