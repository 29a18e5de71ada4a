#![no_main]

use libfuzzer_sys::fuzz_target;
use stqe::loss_train::{TrainConfig, TrainManifest};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = TrainManifest::parse(text) {
            assert!(!m.samples.is_empty());
        }
        if let Ok(c) = serde_json::from_str::<TrainConfig>(text) {
            let _ = c.validate();
        }
    }
});
