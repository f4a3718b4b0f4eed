#![no_main]

use libfuzzer_sys::fuzz_target;
use metaloc::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = ExperimentConfig::from_json(data) {
        let _ = cfg.sources();
        let _ = cfg.target();
    }
});
