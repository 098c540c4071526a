#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = bilevel_cli::parse_config(text) {
            // Anything accepted must survive a round trip.
            let again = bilevel_cli::parse_config(&cfg.to_toml()).expect("serialized config parses");
            assert_eq!(again, cfg);
        }
    }
});
