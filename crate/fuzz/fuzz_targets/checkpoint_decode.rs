#![no_main]

use hso_core::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = checkpoint::decode(data) {
        let params = ck.params::<f64>();
        let back = checkpoint::decode(&checkpoint::encode(&params, &ck.tokenizer)).unwrap();
        assert!(back.params::<f64>().bit_eq(&params));
        assert_eq!(back.tokenizer, ck.tokenizer);
    }
});
