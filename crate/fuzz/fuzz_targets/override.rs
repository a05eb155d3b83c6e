#![no_main]

use libfuzzer_sys::fuzz_target;
use lrthr_core::config::{apply_override, ScenarioConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let overrides: Vec<String> = text.lines().map(str::to_string).collect();
    let mut table = toml::Table::new();
    for o in &overrides {
        let _ = apply_override(&mut table, o);
    }
    let _ = ScenarioConfig::from_toml_str("", &overrides);
});
