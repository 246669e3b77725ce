#![no_main]

use libfuzzer_sys::fuzz_target;
use specrec::autodiff::{decode_ckp1, encode_ckp1};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode_ckp1(data) {
        let again = encode_ckp1(entries.iter().map(|(n, t)| (n.as_str(), t))).expect("decoded entries re-encode");
        assert_eq!(decode_ckp1(&again).expect("re-encoded checkpoint decodes"), entries);
    }
});
