#![no_main]

use clipbias_core::{TreeIndex, TreeSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let vocab = data[0] as usize % 12;
    let horizon = data[1] as usize % 8;
    let prompts = data[2] as usize % 6;
    let Ok(index) = TreeIndex::new(&TreeSpec::new(vocab, horizon, prompts)) else {
        return;
    };
    for chunk in data[3..].chunks(4) {
        let mut raw = [0u8; 4];
        raw[..chunk.len()].copy_from_slice(chunk);
        let state = u32::from_le_bytes(raw) as usize;
        match index.decode(state) {
            Ok(decoded) => {
                assert!(state < index.state_count());
                assert_eq!(index.encode(decoded.prompt, &decoded.tokens).unwrap(), state);
            }
            Err(_) => assert!(state >= index.state_count()),
        }
    }
});
