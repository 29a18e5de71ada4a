#![no_main]

use libfuzzer_sys::fuzz_target;
use stqe::metrics::SequenceReport;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(r) = SequenceReport::from_json(text) {
            let again = r.to_json().expect("reports serialize");
            SequenceReport::from_json(&again).expect("own output parses");
        }
    }
});
