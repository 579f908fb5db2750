#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = negfeed::Config::from_toml_str(text) {
            // anything accepted must survive its own round trip
            let again = negfeed::Config::from_toml_str(&cfg.to_toml()).expect("canonical text parses");
            assert_eq!(again, cfg);
        }
    }
});
