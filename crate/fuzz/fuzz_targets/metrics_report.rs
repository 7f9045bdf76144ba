#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = qarep_core::harness::MetricsReport::from_json(text) {
        let again = qarep_core::harness::MetricsReport::from_json(&r.to_json()).expect("report re-parses");
        assert_eq!(again, r);
    }
});
