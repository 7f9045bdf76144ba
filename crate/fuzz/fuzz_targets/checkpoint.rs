#![no_main]

use libfuzzer_sys::fuzz_target;
use qarep_core::encoder::checkpoint::{decode_checkpoint, encode_checkpoint};
use sha2::{Digest, Sha256};

fuzz_target!(|data: &[u8]| {
    let _ = decode_checkpoint(data);

    // Seal the input with a valid digest so the parser past the checksum gets exercised.
    let mut sealed = data.to_vec();
    sealed.extend_from_slice(&Sha256::digest(data));
    if let Ok((store, header)) = decode_checkpoint(&sealed) {
        let bytes = encode_checkpoint(&store, &header).expect("re-encode");
        let (store2, header2) = decode_checkpoint(&bytes).expect("re-decode");
        assert_eq!(header2, header);
        assert_eq!(encode_checkpoint(&store2, &header2).unwrap(), bytes);
    }
});
