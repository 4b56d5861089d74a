#![no_main]

use libfuzzer_sys::fuzz_target;
use voldiff::model::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&c);
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint must decode");
        assert_eq!(encode_checkpoint(&again), bytes);
    }
});
