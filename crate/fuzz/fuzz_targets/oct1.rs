#![no_main]

use libfuzzer_sys::fuzz_target;
use specrec::io::{decode_oct1, encode_oct1};

fuzz_target!(|data: &[u8]| {
    if let Ok((dims, values)) = decode_oct1(data) {
        assert_eq!(dims.iter().product::<usize>(), values.len());
        // Anything the decoder accepts re-encodes to the same bytes; NaN
        // payloads may be quieted on the way through f64.
        if values.iter().all(|v| !v.is_nan()) {
            let again = encode_oct1(&dims, &values).expect("decoded arrays re-encode");
            assert_eq!(&again[..], data);
        }
    }
});
