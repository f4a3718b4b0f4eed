//! Training on an unseen target environment, starting from a trunk learned on
//! source environments, and learning curves over the target sample count.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Graph, OptimizerState, Tensor};
use crate::error::{Error, Result};
use crate::fingerprint::Dataset;
use crate::metatrain::{
    batch_count, evaluate, meta_train, EnvTask, EpochRecord, TrainConfig, TrainHistory, Trainer,
    EVAL_CHUNK,
};
use crate::model::{build_head, forward_trunk, ArchConfig, HeadParams, ModelParams, TrunkParams};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    /// Trunk initialized from the source trunk, everything trains.
    Finetune,
    /// Trunk (including batchnorm statistics) fixed, only the head trains.
    Freeze,
    /// Fresh trunk and head; the source trunk is ignored.
    Scratch,
}

impl TransferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::Finetune => "finetune",
            TransferMode::Freeze => "freeze",
            TransferMode::Scratch => "scratch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(TransferMode::Finetune),
            "freeze" => Ok(TransferMode::Freeze),
            "scratch" => Ok(TransferMode::Scratch),
            other => Err(Error::Report(format!("unknown transfer mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TransferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSpec {
    pub target_samples: Vec<usize>,
    pub n_sources: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Modes evaluated on top of the source trunk. Scratch rows are always
    /// produced as the baseline.
    pub modes: Vec<TransferMode>,
    /// Source training uses `N_S / N` samples per environment.
    pub constrained: bool,
}

impl Default for CurveSpec {
    fn default() -> Self {
        Self {
            target_samples: vec![50, 100, 200, 500, 1000],
            n_sources: vec![1, 2, 3, 4],
            seeds: vec![0, 1, 2],
            modes: vec![TransferMode::Finetune, TransferMode::Freeze],
            constrained: false,
        }
    }
}

impl CurveSpec {
    /// All modes in the sweep, scratch included, in report order.
    pub fn all_modes(&self) -> Vec<TransferMode> {
        let mut modes = self.modes.clone();
        modes.push(TransferMode::Scratch);
        modes.sort();
        modes.dedup();
        modes
    }

    pub fn validate(&self, num_sources: usize, target_pool: usize) -> Result<()> {
        if self.target_samples.is_empty() || self.n_sources.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("curve needs sample counts, source counts and seeds"));
        }
        for &n in &self.n_sources {
            if n == 0 || n > num_sources {
                return Err(Error::config(format!(
                    "source count {n} outside 1..={num_sources}"
                )));
            }
        }
        for &k in &self.target_samples {
            if k < 2 || k > target_pool {
                return Err(Error::config(format!(
                    "target sample count {k} outside 2..={target_pool}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub model: ModelParams,
    pub history: TrainHistory,
    /// ME on the target test split after the last epoch.
    pub test_me_m: f64,
}

/// Trains on the first `k` target training samples in `mode`.
pub fn transfer_train(
    theta_init: Option<&TrunkParams>,
    target: &Dataset,
    k: usize,
    mode: TransferMode,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<TransferOutcome> {
    let train = target.train_subset(k)?.to_vec();
    let ids = [target.env_id];
    let (model, history) = match mode {
        TransferMode::Scratch => {
            let model = ModelParams::init(arch, &ids, cfg.seed)?;
            train_all(model, target, train, cfg)?
        }
        TransferMode::Finetune => {
            let theta = require_theta(theta_init, mode)?;
            let model = ModelParams::with_trunk(arch, theta.clone(), &ids, cfg.seed)?;
            train_all(model, target, train, cfg)?
        }
        TransferMode::Freeze => {
            let theta = require_theta(theta_init, mode)?;
            train_head_only(theta, target, train, arch, cfg)?
        }
    };
    let test_me_m = evaluate(&model, target.env_id, target, &target.test_indices)?;
    Ok(TransferOutcome {
        model,
        history,
        test_me_m,
    })
}

fn require_theta(theta: Option<&TrunkParams>, mode: TransferMode) -> Result<&TrunkParams> {
    theta.ok_or_else(|| Error::config(format!("{mode} mode needs a source trunk")))
}

fn train_all(
    model: ModelParams,
    target: &Dataset,
    train: Vec<usize>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let task = EnvTask {
        env_id: target.env_id,
        data: target,
        train,
    };
    Trainer::new(model, vec![task], cfg.clone())?.run()
}

/// Head-only training on cached eval-mode trunk features. The trunk never
/// sees a gradient or a batch statistic, so it leaves bit-identical.
fn train_head_only(
    theta: &TrunkParams,
    target: &Dataset,
    train: Vec<usize>,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::config("the target needs at least 2 training samples"));
    }
    if (target.n_rows, target.n_sub) != (arch.input_antennas, arch.input_subcarriers) {
        return Err(Error::config("target fingerprints do not match the architecture"));
    }
    let env_id = target.env_id;
    let width = arch.fc_width;

    // Features and labels keyed by dataset index.
    let mut features: BTreeMap<usize, (Vec<f64>, [f64; 2])> = BTreeMap::new();
    for chunk in train.chunks(EVAL_CHUNK) {
        let (x, y) = target.batch(chunk);
        let (z, _) = forward_trunk(theta, &x, BnMode::Eval)?;
        for (j, &i) in chunk.iter().enumerate() {
            let row = z.data()[j * width..(j + 1) * width].to_vec();
            features.insert(i, (row, [y.data()[2 * j], y.data()[2 * j + 1]]));
        }
    }

    let mut head = HeadParams::init(arch, env_id, cfg.seed)?;
    let shapes: Vec<Vec<usize>> = head.trainable().iter().map(|t| t.shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &refs);
    let bs = cfg.batch_size;
    let n_batches = batch_count(train.len(), bs);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order = train.clone();
        let mut rng = rng::rng_for(cfg.seed, &[tag::SHUFFLE, epoch as u64, env_id.0 as u64]);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for b in 0..n_batches {
            let idx = &order[b * bs..((b + 1) * bs).min(order.len())];
            let mut zd = Vec::with_capacity(idx.len() * width);
            let mut yd = Vec::with_capacity(idx.len() * 2);
            for i in idx {
                let (z, y) = &features[i];
                zd.extend_from_slice(z);
                yd.extend_from_slice(y);
            }
            let z = Tensor::new(vec![idx.len(), width], zd)?;
            let y = Tensor::new(vec![idx.len(), 2], yd)?;
            let grads = {
                let mut g = Graph::new();
                let zv = g.input(z);
                let pred = build_head(&mut g, &head, zv, Some(0))?;
                let yv = g.input(y);
                let loss = g.mse(pred, yv)?;
                loss_sum += g.value(loss).item();
                let mut grads = g.backward(loss)?;
                (0..shapes.len())
                    .map(|j| grads.take(j).ok_or_else(|| Error::contract("missing head gradient")))
                    .collect::<Result<Vec<_>>>()?
            };
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
            opt.step(&mut head.trainable_mut(), &grad_refs)?;
        }
        let train_loss = loss_sum / n_batches as f64;
        if !train_loss.is_finite() {
            return Err(Error::contract(format!(
                "head training diverged for environment {env_id} at epoch {epoch}"
            )));
        }
        let test_me_m = if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate_head(theta, &head, arch, target)?)
        } else {
            None
        };
        history.records.push(EpochRecord {
            epoch,
            env_id,
            train_loss,
            test_me_m,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let mut heads = BTreeMap::new();
    heads.insert(env_id, head);
    let model = ModelParams {
        arch: arch.clone(),
        trunk: theta.clone(),
        heads,
    };
    Ok((model, history))
}

fn evaluate_head(theta: &TrunkParams, head: &HeadParams, arch: &ArchConfig, target: &Dataset) -> Result<f64> {
    let mut heads = BTreeMap::new();
    heads.insert(target.env_id, head.clone());
    let model = ModelParams {
        arch: arch.clone(),
        trunk: theta.clone(),
        heads,
    };
    evaluate(&model, target.env_id, target, &target.test_indices)
}

/// `100 * (frozen - finetuned) / finetuned`. One-sided: swapping the
/// arguments does not negate the result.
pub fn percent_increase(frozen_me: f64, finetuned_me: f64) -> Result<f64> {
    if !(finetuned_me > 0.0) {
        return Err(Error::contract(format!(
            "fine-tuned ME must be positive, got {finetuned_me}"
        )));
    }
    Ok(100.0 * (frozen_me - finetuned_me) / finetuned_me)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub n_sources: usize,
    pub target_samples: usize,
    pub mode: TransferMode,
    pub seed: u64,
    pub me_m: f64,
    pub constrained: bool,
    pub wall_seconds: f64,
}

pub const EVAL_REPORT_COLUMNS: [&str; 7] = [
    "n_sources",
    "target_samples",
    "mode",
    "seed",
    "me_m",
    "constrained",
    "wall_seconds",
];

/// Learning-curve results, sorted by `(n_sources, target_samples, mode, seed)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<CurveRow>,
}

impl EvalReport {
    /// Writes the report; `wall_seconds` is written as 0 unless
    /// `with_timings`, so reruns produce identical bytes.
    pub fn write_csv<W: Write>(&self, w: W, with_timings: bool) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(EVAL_REPORT_COLUMNS)?;
        for r in &self.rows {
            let secs = if with_timings { r.wall_seconds } else { 0.0 };
            out.write_record([
                r.n_sources.to_string(),
                r.target_samples.to_string(),
                r.mode.to_string(),
                r.seed.to_string(),
                r.me_m.to_string(),
                r.constrained.to_string(),
                secs.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Report(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(EVAL_REPORT_COLUMNS) {
            return Err(Error::Report(format!(
                "expected columns {}, found {}",
                EVAL_REPORT_COLUMNS.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |what: &str| Error::Report(format!("row {}: bad {what}", line + 1));
            rows.push(CurveRow {
                n_sources: field(0).parse().map_err(|_| bad("n_sources"))?,
                target_samples: field(1).parse().map_err(|_| bad("target_samples"))?,
                mode: TransferMode::parse(field(2))?,
                seed: field(3).parse().map_err(|_| bad("seed"))?,
                me_m: field(4).parse().map_err(|_| bad("me_m"))?,
                constrained: field(5).parse().map_err(|_| bad("constrained"))?,
                wall_seconds: field(6).parse().map_err(|_| bad("wall_seconds"))?,
            });
        }
        Ok(Self { rows })
    }

    /// Seed-mean ME of one cell, if present.
    pub fn mean_me(&self, n_sources: usize, target_samples: usize, mode: TransferMode) -> Option<f64> {
        let mes: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.n_sources == n_sources && r.target_samples == target_samples && r.mode == mode)
            .map(|r| r.me_m)
            .collect();
        if mes.is_empty() {
            None
        } else {
            Some(mes.iter().sum::<f64>() / mes.len() as f64)
        }
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.me_m.is_finite())
    }
}

/// Source training config for `n` environments under `spec`.
fn source_config(cfg: &TrainConfig, spec: &CurveSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        constrained: spec.constrained,
        ..cfg.clone()
    }
}

/// Meta-trains on the first `n` sources with `seed`, returning the trunk.
pub fn source_trunk(
    sources: &[&Dataset],
    n: usize,
    seed: u64,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    spec: &CurveSpec,
) -> Result<TrunkParams> {
    if n == 0 || n > sources.len() {
        return Err(Error::config(format!("cannot take {n} of {} sources", sources.len())));
    }
    let (model, _) = meta_train(&sources[..n], arch, &source_config(cfg, spec, seed))?;
    Ok(model.trunk)
}

/// Full sweep: meta-train per `(N, seed)`, then transfer every cell.
pub fn run_curve(
    sources: &[&Dataset],
    target: &Dataset,
    spec: &CurveSpec,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if sources.is_empty() {
        return Err(Error::config("a learning curve needs at least one source"));
    }
    spec.validate(sources.len(), target.train_indices.len())?;
    let keys: Vec<(usize, u64)> = spec
        .n_sources
        .iter()
        .flat_map(|&n| spec.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let trunks = keys
        .par_iter()
        .map(|&(n, s)| Ok(((n, s), source_trunk(sources, n, s, arch, cfg, spec)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    run_curve_from_trunks(&trunks, target, spec, arch, cfg)
}

/// Sweep over precomputed source trunks keyed by `(N, seed)`. Scratch does
/// not depend on `N`; it is trained once per `(k, seed)` and reported under
/// every `N`.
pub fn run_curve_from_trunks(
    trunks: &BTreeMap<(usize, u64), TrunkParams>,
    target: &Dataset,
    spec: &CurveSpec,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    spec.validate(usize::MAX, target.train_indices.len())?;
    let mut cells: Vec<(Option<usize>, usize, TransferMode, u64)> = Vec::new();
    for &k in &spec.target_samples {
        for &seed in &spec.seeds {
            cells.push((None, k, TransferMode::Scratch, seed));
            for &n in &spec.n_sources {
                for &mode in spec.modes.iter().filter(|m| **m != TransferMode::Scratch) {
                    if !trunks.contains_key(&(n, seed)) {
                        return Err(Error::config(format!("no source trunk for N={n}, seed {seed}")));
                    }
                    cells.push((Some(n), k, mode, seed));
                }
            }
        }
    }
    let results = cells
        .par_iter()
        .map(|&(n, k, mode, seed)| {
            let start = Instant::now();
            let theta = n.map(|n| &trunks[&(n, seed)]);
            let cell_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let out = transfer_train(theta, target, k, mode, arch, &cell_cfg)?;
            Ok(((n, k, mode, seed), (out.test_me_m, start.elapsed().as_secs_f64())))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;

    let mut rows = Vec::new();
    for &n in &spec.n_sources {
        for &k in &spec.target_samples {
            for mode in spec.all_modes() {
                for &seed in &spec.seeds {
                    let key = match mode {
                        TransferMode::Scratch => (None, k, mode, seed),
                        _ => (Some(n), k, mode, seed),
                    };
                    let (me_m, wall_seconds) = results[&key];
                    rows.push(CurveRow {
                        n_sources: n,
                        target_samples: k,
                        mode,
                        seed,
                        me_m,
                        constrained: spec.constrained,
                        wall_seconds,
                    });
                }
            }
        }
    }
    let mut report = EvalReport { rows };
    report.rows.sort_by(|a, b| {
        (a.n_sources, a.target_samples, a.mode, a.seed).cmp(&(b.n_sources, b.target_samples, b.mode, b.seed))
    });
    Ok(report)
}

/// Source samples consumed by meta-training on the first `n` sources.
pub fn source_sample_count(sources: &[&Dataset], n: usize, cfg: &TrainConfig, spec: &CurveSpec) -> Result<usize> {
    let cfg = source_config(cfg, spec, cfg.seed);
    let tasks = crate::metatrain::budgeted_tasks(&sources[..n.min(sources.len())], &cfg)?;
    Ok(tasks.iter().map(|t| t.train.len()).sum())
}
