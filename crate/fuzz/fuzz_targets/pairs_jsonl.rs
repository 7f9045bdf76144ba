#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = qarep_core::bertscore::parse_pairs(text).and_then(|p| qarep_core::bertscore::validate_pairs(&p));
});
