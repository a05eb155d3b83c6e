#![no_main]

use libfuzzer_sys::fuzz_target;
use lrthr_core::config::ScenarioConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = ScenarioConfig::from_toml_str(text, &[]) {
        // anything accepted survives a save/parse round trip
        let saved = config.to_toml_string();
        let again = ScenarioConfig::from_toml_str(&saved, &[]).expect("saved config parses");
        assert_eq!(config, again);
    }
});
