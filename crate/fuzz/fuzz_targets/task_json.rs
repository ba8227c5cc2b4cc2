#![no_main]

use hso_core::fewshot::TaskSpec;
use hso_core::tokenizer::ByteTokenizer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(task) = TaskSpec::from_json(text) {
        let _ = task.label_tokens(&ByteTokenizer);
    }
});
