//! Config-driven experiment stages. Each stage reads the artifacts of the
//! previous ones from the output directory, so any stage can be rerun on its
//! own and overwrites its outputs in place.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel_sim::{build_environment, EnvId, Geometry, RadioConfig};
use crate::error::{Error, Result};
use crate::fingerprint::{build_dataset, Dataset, Sampling, SplitRole};
use crate::metatrain::{evaluate, meta_train, train_separate, TrainConfig};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::{ArchConfig, TrunkParams};
use crate::report::{SourceEval, SourceEvalRow, SourceScheme};
use crate::rng::{self, tag};
use crate::transfer::{run_curve_from_trunks, source_trunk, CurveSpec, EvalReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub env_id: EnvId,
    pub role: SplitRole,
    /// Overrides [`ExperimentConfig::num_scatterers`].
    #[serde(default)]
    pub num_scatterers: Option<usize>,
}

/// One experiment. `curve.seeds` are the seeds of every training stage;
/// `train.seed` is replaced per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub radio: RadioConfig,
    pub geometry: Geometry,
    pub sampling: Sampling,
    pub num_scatterers: usize,
    pub samples_per_env: usize,
    pub environments: Vec<EnvironmentSpec>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub curve: CurveSpec,
    pub output_dir: PathBuf,
    /// Write measured wall-clock seconds into CSVs. Off by default so that
    /// reruns are byte-identical.
    pub record_timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let env = |id, role| EnvironmentSpec {
            env_id: EnvId(id),
            role,
            num_scatterers: None,
        };
        Self {
            seed: 0,
            radio: RadioConfig::default(),
            geometry: Geometry::default(),
            sampling: Sampling::default(),
            num_scatterers: 12,
            samples_per_env: 2000,
            environments: vec![
                env(1, SplitRole::Source),
                env(2, SplitRole::Source),
                env(3, SplitRole::Source),
                env(4, SplitRole::Source),
                env(5, SplitRole::Target),
            ],
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            curve: CurveSpec::default(),
            output_dir: PathBuf::from("runs/default"),
            record_timings: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_slice(bytes).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.radio.validate().map_err(as_config)?;
        self.geometry.validate().map_err(as_config)?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.samples_per_env == 0 {
            return Err(Error::config("samples_per_env must be at least 1"));
        }
        let ids: BTreeSet<EnvId> = self.environments.iter().map(|e| e.env_id).collect();
        if ids.len() != self.environments.len() {
            return Err(Error::config("environment ids must be distinct"));
        }
        if self.sources().is_empty() {
            return Err(Error::config("at least one source environment is required"));
        }
        if self.environments.iter().filter(|e| e.role == SplitRole::Target).count() > 1 {
            return Err(Error::config("at most one target environment is supported"));
        }
        if (self.arch.input_antennas, self.arch.input_subcarriers)
            != (self.radio.num_antenna_pairs(), self.radio.num_pilot_subcarriers)
        {
            return Err(Error::config(format!(
                "arch input {}x{} does not match the radio's {}x{} fingerprints",
                self.arch.input_antennas,
                self.arch.input_subcarriers,
                self.radio.num_antenna_pairs(),
                self.radio.num_pilot_subcarriers
            )));
        }
        Ok(())
    }

    /// Source environment ids in ascending order.
    pub fn sources(&self) -> Vec<EnvId> {
        let mut ids: Vec<EnvId> = self
            .environments
            .iter()
            .filter(|e| e.role == SplitRole::Source)
            .map(|e| e.env_id)
            .collect();
        ids.sort();
        ids
    }

    pub fn target(&self) -> Option<EnvId> {
        self.environments
            .iter()
            .find(|e| e.role == SplitRole::Target)
            .map(|e| e.env_id)
    }

    pub fn environment_seed(&self, env_id: EnvId) -> u64 {
        rng::derive_seed(self.seed, &[tag::ENVIRONMENT, env_id.0 as u64])
    }

    pub fn dataset_seed(&self, env_id: EnvId) -> u64 {
        rng::derive_seed(self.seed, &[tag::DATASET, env_id.0 as u64])
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::config(other.to_string()),
    }
}

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifacts: Vec<PathBuf>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

/// `run_manifest.json` in the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the config file bytes.
    pub config_hash: String,
    pub seed_override: Option<u64>,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

impl RunManifest {
    fn path(out: &Path) -> PathBuf {
        out.join(RUN_MANIFEST_FILE)
    }

    /// The manifest for this config, keeping stage records from an earlier
    /// run of the same config.
    pub fn open(out: &Path, config_hash: &str, seed_override: Option<u64>) -> Self {
        let fresh = Self {
            config_hash: config_hash.to_string(),
            seed_override,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        };
        match fs::read(Self::path(out)).ok().and_then(|b| serde_json::from_slice::<Self>(&b).ok()) {
            Some(m) if m.config_hash == fresh.config_hash && m.seed_override == seed_override => m,
            _ => fresh,
        }
    }

    pub fn record(&mut self, out: &Path, stage: &str, started: u64, artifacts: Vec<PathBuf>) -> Result<()> {
        let rel = artifacts
            .into_iter()
            .map(|p| p.strip_prefix(out).map(Path::to_path_buf).unwrap_or(p))
            .collect();
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                artifacts: rel,
                started_unix_s: started,
                finished_unix_s: unix_now(),
            },
        );
        let path = Self::path(out);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Output locations of every stage.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset_dir(&self, env_id: EnvId) -> PathBuf {
        self.root.join("data").join(format!("env{env_id}"))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn meta_dir(&self) -> PathBuf {
        self.root.join("meta")
    }

    pub fn transfer_dir(&self) -> PathBuf {
        self.root.join("transfer")
    }

    pub fn curve_dir(&self) -> PathBuf {
        self.root.join("curve")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn meta_checkpoint(&self, seed: u64) -> PathBuf {
        self.meta_dir().join(format!("joint_seed{seed}.ckpt"))
    }
}

pub const SOURCE_EVAL_FILE: &str = "source_eval.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.csv";

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Builds one dataset per configured environment, in config order.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    cfg.environments
        .par_iter()
        .map(|spec| {
            let env = build_environment(
                spec.env_id,
                cfg.environment_seed(spec.env_id),
                &cfg.geometry,
                spec.num_scatterers.unwrap_or(cfg.num_scatterers),
            )?;
            build_dataset(
                &env,
                &cfg.sampling,
                &cfg.radio,
                cfg.samples_per_env,
                spec.role,
                cfg.dataset_seed(spec.env_id),
            )
        })
        .collect()
}

/// Builds and saves one dataset per environment.
pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    build_datasets(cfg)?
        .into_iter()
        .map(|ds| {
            let dir = layout.dataset_dir(ds.env_id);
            ds.save(&dir)?;
            Ok(dir)
        })
        .collect()
}

/// Loads the datasets of `ids`, checking they match the config.
pub fn load_datasets(cfg: &ExperimentConfig, layout: &Layout, ids: &[EnvId]) -> Result<Vec<Dataset>> {
    ids.iter()
        .map(|&id| {
            let dir = layout.dataset_dir(id);
            let ds = Dataset::load(&dir).map_err(|e| match e {
                Error::Io { path, .. } => Error::Dataset(format!(
                    "missing dataset for environment {id} ({}); run gen-data first",
                    path.display()
                )),
                other => other,
            })?;
            if ds.radio != cfg.radio || ds.len() != cfg.samples_per_env {
                return Err(Error::Dataset(format!(
                    "dataset in {} was generated from a different config",
                    dir.display()
                )));
            }
            Ok(ds)
        })
        .collect()
}

fn target_dataset(cfg: &ExperimentConfig, layout: &Layout) -> Result<Dataset> {
    let id = cfg
        .target()
        .ok_or_else(|| Error::config("this stage needs a target environment"))?;
    Ok(load_datasets(cfg, layout, &[id])?.remove(0))
}

/// Separate training per source environment and seed.
pub fn cmd_train(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let sources = load_datasets(cfg, layout, &cfg.sources())?;
    let dir = layout.train_dir();
    mkdir(&dir)?;
    let jobs: Vec<(u64, &Dataset)> = cfg
        .curve
        .seeds
        .iter()
        .flat_map(|&s| sources.iter().map(move |d| (s, d)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(seed, ds)| {
            let (model, history) = train_separate(ds, &cfg.arch, &cfg.train_config(seed))?;
            let me_m = evaluate(&model, ds.env_id, ds, &ds.test_indices)?;
            let stem = format!("separate_seed{seed}_env{}", ds.env_id);
            let ckpt = dir.join(format!("{stem}.ckpt"));
            save_checkpoint(&Checkpoint::from_model(&model), &ckpt)?;
            let hist = dir.join(format!("{stem}_history.csv"));
            let mut buf = Vec::new();
            history.write_csv(&mut buf, cfg.record_timings)?;
            write_file(&hist, &buf)?;
            Ok((
                SourceEvalRow {
                    env_id: ds.env_id,
                    scheme: SourceScheme::Separate,
                    seed,
                    me_m,
                },
                [ckpt, hist],
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, paths): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    finish_source_eval(&dir, rows, paths.into_iter().flatten().collect())
}

/// Joint training over all sources, one run per seed.
pub fn cmd_meta_train(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let sources = load_datasets(cfg, layout, &cfg.sources())?;
    let refs: Vec<&Dataset> = sources.iter().collect();
    let dir = layout.meta_dir();
    mkdir(&dir)?;
    let results = cfg
        .curve
        .seeds
        .par_iter()
        .map(|&seed| {
            let (model, history) = meta_train(&refs, &cfg.arch, &cfg.train_config(seed))?;
            let ckpt = layout.meta_checkpoint(seed);
            save_checkpoint(&Checkpoint::from_model(&model), &ckpt)?;
            let hist = dir.join(format!("joint_seed{seed}_history.csv"));
            let mut buf = Vec::new();
            history.write_csv(&mut buf, cfg.record_timings)?;
            write_file(&hist, &buf)?;
            let rows = sources
                .iter()
                .map(|ds| {
                    Ok(SourceEvalRow {
                        env_id: ds.env_id,
                        scheme: SourceScheme::Joint,
                        seed,
                        me_m: evaluate(&model, ds.env_id, ds, &ds.test_indices)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((rows, [ckpt, hist]))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for (r, paths) in results {
        rows.extend(r);
        artifacts.extend(paths);
    }
    finish_source_eval(&dir, rows, artifacts)
}

fn finish_source_eval(dir: &Path, rows: Vec<SourceEvalRow>, mut artifacts: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    let path = dir.join(SOURCE_EVAL_FILE);
    let mut buf = Vec::new();
    SourceEval::new(rows).write_csv(&mut buf)?;
    write_file(&path, &buf)?;
    artifacts.push(path);
    Ok(artifacts)
}

/// Transfer from the joint trunks of `meta-train` (all sources) to the
/// target, over the configured sample counts, modes and seeds.
pub fn cmd_transfer(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let target = target_dataset(cfg, layout)?;
    let n = cfg.sources().len();
    let mut trunks = BTreeMap::new();
    for &seed in &cfg.curve.seeds {
        let path = layout.meta_checkpoint(seed);
        let ckpt = load_checkpoint(&path).map_err(|e| match e {
            Error::Io { .. } => Error::Checkpoint(format!(
                "missing {}; run meta-train first",
                path.display()
            )),
            other => other,
        })?;
        ckpt.expect_arch(&cfg.arch)?;
        trunks.insert((n, seed), ckpt.trunk);
    }
    let spec = CurveSpec {
        n_sources: vec![n],
        ..cfg.curve.clone()
    };
    let report = run_curve_from_trunks(&trunks, &target, &spec, &cfg.arch, &cfg.train)?;
    write_report(cfg, &layout.transfer_dir(), &report)
}

/// The full learning-curve grid: meta-training per `(N, seed)`, then every
/// transfer cell.
pub fn cmd_curve(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let sources = load_datasets(cfg, layout, &cfg.sources())?;
    let target = target_dataset(cfg, layout)?;
    let refs: Vec<&Dataset> = sources.iter().collect();
    cfg.curve.validate(refs.len(), target.train_indices.len())?;
    let dir = layout.curve_dir();
    mkdir(&dir)?;
    let keys: Vec<(usize, u64)> = cfg
        .curve
        .n_sources
        .iter()
        .flat_map(|&n| cfg.curve.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let trunks = keys
        .par_iter()
        .map(|&(n, seed)| {
            let trunk = source_trunk(&refs, n, seed, &cfg.arch, &cfg.train, &cfg.curve)?;
            let path = dir.join(format!("trunk_n{n}_seed{seed}.ckpt"));
            save_checkpoint(&Checkpoint::trunk_only(&cfg.arch, &trunk), &path)?;
            Ok(((n, seed), (trunk, path)))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut artifacts: Vec<PathBuf> = trunks.values().map(|(_, p)| p.clone()).collect();
    let trunks: BTreeMap<(usize, u64), TrunkParams> =
        trunks.into_iter().map(|(k, (t, _))| (k, t)).collect();
    let report = run_curve_from_trunks(&trunks, &target, &cfg.curve, &cfg.arch, &cfg.train)?;
    artifacts.extend(write_report(cfg, &dir, &report)?);
    Ok(artifacts)
}

fn write_report(cfg: &ExperimentConfig, dir: &Path, report: &EvalReport) -> Result<Vec<PathBuf>> {
    if !report.all_finite() {
        return Err(Error::contract("a transfer cell produced a non-finite ME"));
    }
    mkdir(dir)?;
    let path = dir.join(EVAL_REPORT_FILE);
    let mut buf = Vec::new();
    report.write_csv(&mut buf, cfg.record_timings)?;
    write_file(&path, &buf)?;
    Ok(vec![path])
}
