//! The checkpoint decoder guards a binary format: no panics, no huge
//! allocations from hostile headers.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = licfl::model::ParamVector::from_bytes(data);
});
