#![no_main]

use hso_core::config::{FlatConfig, KvConfig};
use hso_core::dynamic_eval::DeConfig;
use hso_core::hso::HsoConfig;
use hso_core::model::ModelConfig;
use hso_core::train::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(kv) = KvConfig::parse(text) else { return };
    assert_eq!(KvConfig::parse(&kv.to_text()).unwrap(), kv);
    let _ = HsoConfig::from_kv(&kv);
    let _ = DeConfig::from_kv(&kv);
    let _ = ModelConfig::from_kv(&kv);
    let _ = TrainConfig::from_kv(&kv);
});
