#![no_main]

use libfuzzer_sys::fuzz_target;
use rtsrk_cli::config::{ExperimentConfig, RawConfig};
use rtsrk_cli::experiments::Experiment;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(raw) = RawConfig::parse(text) else { return };
    // Flattened output must parse back to the same entries.
    let again = RawConfig::parse(&raw.to_toml()).expect("serialised config reparses");
    assert_eq!(again.entries(), raw.entries());
    for e in Experiment::ALL {
        if let Ok(cfg) = ExperimentConfig::validate(&raw, &e.keys()) {
            let back = ExperimentConfig::validate(&cfg.to_raw(), &e.keys()).expect("validated config revalidates");
            assert_eq!(back.values(), cfg.values());
        }
    }
});
