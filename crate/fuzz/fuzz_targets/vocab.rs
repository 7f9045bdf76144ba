#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tokens) = serde_json::from_str::<Vec<String>>(text) {
        let _ = qarep_core::corpus::Vocabulary::from_tokens(tokens);
    }
});
