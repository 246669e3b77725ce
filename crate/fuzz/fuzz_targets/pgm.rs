#![no_main]

use libfuzzer_sys::fuzz_target;
use specrec::io::{decode_pgm, encode_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = decode_pgm(&encode_pgm(&img).expect("unit image encodes")).expect("own output decodes");
        assert_eq!(back.shape(), img.shape());
    }
});
