#![no_main]

use libfuzzer_sys::fuzz_target;
use voldiff::config::{parse_entries, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_entries(text);
    if let Ok(c) = RunConfig::from_text(text) {
        let back = RunConfig::from_text(&c.resolved()).expect("resolved config must parse");
        assert_eq!(back, c);
    }
});
