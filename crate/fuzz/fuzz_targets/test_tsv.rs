#![no_main]

use hso_core::fewshot::{parse_tsv, TaskSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let task = TaskSpec {
        classes: vec!["pos".into(), "neg".into()],
        template: "{text} => {label}".into(),
        separator: "\n".into(),
        max_example_tokens: 35,
    };
    if let Ok(rows) = parse_tsv(text, &task) {
        assert!(rows.iter().all(|r| r.label < task.classes.len()));
    }
});
