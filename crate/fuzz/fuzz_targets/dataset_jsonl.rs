#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = qarep_core::corpus::dataset::parse_dataset(text).and_then(|r| qarep_core::corpus::dataset::validate_dataset(&r, &qarep_core::corpus::dataset::DatasetLimits::default()));
});
