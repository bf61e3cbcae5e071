#![no_main]

use clipbias::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        // accepted configs survive the resolved-config echo
        let echoed = RunConfig::from_toml(&cfg.to_toml()).expect("echo reparses");
        assert_eq!(echoed, cfg);
    }
});
