#![no_main]

use clipbias::{parse_eps_high_list, parse_eps_low_list};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(low) = parse_eps_low_list(text) {
        assert!(!low.is_empty());
        assert!(low.iter().all(|&e| e > 0.0 && e <= 1.0));
    }
    if let Ok(high) = parse_eps_high_list(text) {
        assert!(!high.is_empty());
        assert!(high.iter().all(|&e| e > 0.0));
    }
});
