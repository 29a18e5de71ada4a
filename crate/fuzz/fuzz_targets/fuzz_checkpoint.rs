#![no_main]

use libfuzzer_sys::fuzz_target;
use stqe::network::checkpoint::{decode, describe, encode};

fuzz_target!(|data: &[u8]| {
    let described = describe(data);
    match decode(data) {
        Ok(params) => {
            assert!(described.is_ok());
            assert_eq!(encode(&params), data, "decode/encode is the identity on valid files");
        }
        Err(_) => assert!(described.is_err()),
    }
});
