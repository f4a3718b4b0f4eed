#![no_main]

use libfuzzer_sys::fuzz_target;
use metaloc::channel_sim::Environment;

fuzz_target!(|data: &[u8]| {
    if let Ok(env) = Environment::from_json(data) {
        let text = env.to_json().expect("valid environments serialize");
        assert_eq!(Environment::from_json(text.as_bytes()).expect("round trip"), env);
    }
});
