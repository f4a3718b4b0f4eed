#![no_main]

use libfuzzer_sys::fuzz_target;
use metaloc::model::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // Compared as bytes: stored tensors may hold NaN.
        let bytes = ckpt.encode().expect("decoded checkpoints re-encode");
        let again = Checkpoint::decode(&bytes).expect("re-decode");
        assert_eq!(again.encode().expect("encode"), bytes);
    }
});
