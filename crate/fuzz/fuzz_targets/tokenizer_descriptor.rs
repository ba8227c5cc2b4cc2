#![no_main]

use hso_core::tokenizer::from_descriptor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tok) = from_descriptor(text) {
        let ids = tok.encode(data);
        assert!(ids.iter().all(|&i| i < tok.vocab_size()));
        assert_eq!(from_descriptor(&tok.descriptor()).unwrap().descriptor(), tok.descriptor());
    }
});
