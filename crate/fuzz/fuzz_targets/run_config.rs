#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = qarep_core::harness::RunConfig::from_toml(text) {
        let _ = c.validate();
        let _ = c.to_toml();
    }
});
