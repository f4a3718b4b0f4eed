//! The checked-in fuzz seeds must stay valid inputs, so that fuzzing starts
//! from the accepting paths of every decoder.

use std::fs;
use std::path::{Path, PathBuf};

use metaloc::channel_sim::Environment;
use metaloc::experiment::ExperimentConfig;
use metaloc::fingerprint::Dataset;
use metaloc::model::checkpoint::Checkpoint;
use metaloc::report::SourceEval;
use metaloc::transfer::EvalReport;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn checkpoint_seeds_decode() {
    for (p, b) in seeds("checkpoint_decode") {
        let ckpt = Checkpoint::decode(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(ckpt.encode().unwrap(), b);
    }
}

#[test]
fn dataset_seeds_decode() {
    for (p, b) in seeds("dataset_from_parts") {
        let m = u32::from_le_bytes(b[0..4].try_into().unwrap()) as usize;
        let f = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
        let rest = &b[8..];
        let ds = Dataset::from_parts(&rest[..m], &rest[m..m + f], &rest[m + f..])
            .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(ds.len(), 2);
    }
}

#[test]
fn environment_seeds_decode() {
    for (p, b) in seeds("environment_json") {
        Environment::from_json(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn config_seeds_decode() {
    for (p, b) in seeds("experiment_config") {
        ExperimentConfig::from_json(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn csv_seeds_decode() {
    for (p, b) in seeds("result_csv") {
        let ok = EvalReport::read_csv(b.as_slice()).is_ok() || SourceEval::read_csv(b.as_slice()).is_ok();
        assert!(ok, "{} parses as neither result schema", p.display());
    }
}
