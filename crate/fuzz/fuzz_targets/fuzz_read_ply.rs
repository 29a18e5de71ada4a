#![no_main]

use libfuzzer_sys::fuzz_target;
use stqe::pcdata::{parse_ply, write_ply_to, ColorMode, Encoding, ReadOptions};

fuzz_target!(|data: &[u8]| {
    for dedup in [false, true] {
        let opts = ReadOptions { dedup, ..Default::default() };
        if let Ok(pc) = parse_ply(data, &opts) {
            pc.validate().expect("parsed clouds are valid");
            // Anything accepted must survive a lossless round trip.
            let mut buf = Vec::new();
            write_ply_to(&pc, &mut buf, Encoding::BinaryLittleEndian, ColorMode::YcbcrFloat, opts.matrix).unwrap();
            let back = parse_ply(&buf, &ReadOptions::default()).expect("own output parses");
            assert_eq!(back.geometry(), pc.geometry());
            assert_eq!(back.attributes(), pc.attributes());
        }
    }
});
