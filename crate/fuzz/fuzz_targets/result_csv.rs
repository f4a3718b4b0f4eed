#![no_main]

use libfuzzer_sys::fuzz_target;
use metaloc::report::SourceEval;
use metaloc::transfer::EvalReport;

fuzz_target!(|data: &[u8]| {
    if let Ok(report) = EvalReport::read_csv(data) {
        let mut out = Vec::new();
        report.write_csv(&mut out, true).expect("write");
    }
    if let Ok(eval) = SourceEval::read_csv(data) {
        let mut out = Vec::new();
        eval.write_csv(&mut out).expect("write");
    }
});
