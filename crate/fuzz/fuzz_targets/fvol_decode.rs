#![no_main]

use libfuzzer_sys::fuzz_target;
use voldiff::volume::{decode_volume, encode_volume};

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = decode_volume(data) {
        let bytes = encode_volume(&v);
        let again = decode_volume(&bytes).expect("re-encoded volume must decode");
        assert_eq!(encode_volume(&again), bytes);
    }
});
