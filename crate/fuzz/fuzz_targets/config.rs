#![no_main]

use fedsim::config_file::{parse_config_str, to_toml};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse_config_str(text) {
        if let Ok(again) = to_toml(&cfg) {
            assert_eq!(parse_config_str(&again).unwrap(), cfg);
        }
    }
});
