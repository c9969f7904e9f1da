#![no_main]

use libfuzzer_sys::fuzz_target;
use rtsrk_cli::config::RawConfig;
use rtsrk_cli::experiments::Experiment;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = std::str::from_utf8(data) else { return };
    let mut raw = RawConfig::parse(Experiment::McMse.default_config()).expect("default parses");
    if raw.apply_override(spec).is_ok() {
        let key = spec.split_once('=').expect("accepted overrides contain `=`").0.trim();
        assert!(raw.get(key).is_some());
        RawConfig::parse(&raw.to_toml()).expect("overridden config reparses");
    }
});
