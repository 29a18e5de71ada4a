#![no_main]

use libfuzzer_sys::fuzz_target;
use stqe::metrics::RateTable;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = RateTable::parse(text) {
            assert!(t.rates.windows(2).all(|w| w[0].bpip < w[1].bpip));
        }
    }
});
