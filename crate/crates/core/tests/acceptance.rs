//! Acceptance gate. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.
//!
//! Criteria 5-8 train on the desk profile in `configs/desk.json`; they share
//! source trunks where the quantities coincide (the joint N=4 trunks of
//! criterion 5 are the N=4 trunks of the learning curve, and N=1 is separate
//! training on the first source, see criterion 3).

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metaloc::autodiff::{BnMode, Graph, OptimizerConfig, OptimizerState, Tensor, Var};
use metaloc::channel_sim::{apply_noise, EnvId, RadioConfig, RawCsi};
use metaloc::experiment::{build_datasets, ExperimentConfig};
use metaloc::fingerprint::Dataset;
use metaloc::metatrain::{evaluate, meta_train, train_separate, EnvTask, TrainConfig, Trainer};
use metaloc::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use metaloc::model::{build_head, build_trunk, ArchConfig, ModelParams, TrunkParams};
use metaloc::rng::{rng_for, tag};
use metaloc::transfer::{
    percent_increase, run_curve_from_trunks, source_sample_count, source_trunk, transfer_train, CurveSpec,
    EvalReport, TransferMode,
};
use num_complex::Complex64;

const DESK_CONFIG: &[u8] = include_bytes!("../../../configs/desk.json");
const SMOKE_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

// ---------------------------------------------------------------- criterion 1

const FD_STEP: f64 = 1e-5;
const FD_COORDS: usize = 200;
const FD_TOL: f64 = 1e-4;
/// Magnitude below which a gradient entry counts as zero in the relative
/// error, so that round-off on vanishing entries does not dominate.
const FD_FLOOR: f64 = 1e-8;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

type LayerFn = Box<dyn for<'a> Fn(&mut Graph<'a>, &[Var]) -> metaloc::Result<Var>>;

struct GradCase {
    name: &'static str,
    tensors: Vec<Tensor>,
    f: LayerFn,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `±[lo, hi]`, kept away from ReLU kinks.
fn rand_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval_case(case: &GradCase, tensors: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t)).collect();
    let out = (case.f)(&mut g, &vars).unwrap();
    g.value(out).item()
}

fn check_case(case: &GradCase, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.tensors.iter().enumerate().map(|(i, t)| g.param(t, i)).collect();
    let out = (case.f)(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let coords: Vec<(usize, usize)> = case
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    assert!(coords.len() >= FD_COORDS, "{} has only {} coordinates", case.name, coords.len());
    let picked = coords.iter().copied().choose_multiple(rng, FD_COORDS);
    let mut worst: f64 = 0.0;
    for (i, j) in &picked {
        let analytic = grads.get(*i).map(|t| t.data()[*j]).unwrap_or(0.0);
        let mut plus = case.tensors.clone();
        plus[*i].data_mut()[*j] += FD_STEP;
        let mut minus = case.tensors.clone();
        minus[*i].data_mut()[*j] -= FD_STEP;
        let numeric = (eval_case(case, &plus) - eval_case(case, &minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    (worst, picked.len())
}

fn grad_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = Vec::new();
    for (name, xs, ks, stride) in [
        ("conv2d stride 1x1", [2, 5, 6, 3], [3, 4, 3, 4], (1, 1)),
        ("conv2d stride 1x4", [2, 6, 9, 2], [4, 4, 2, 3], (1, 4)),
        ("conv2d stride 2x3 1x1 kernel", [3, 5, 7, 4], [1, 1, 4, 5], (2, 3)),
    ] {
        let x = rand_tensor(&xs, rng, -1.0, 1.0);
        let k = rand_tensor(&ks, rng, -0.5, 0.5);
        let b = rand_tensor(&[ks[3]], rng, -0.5, 0.5);
        let oh = xs[1].div_ceil(stride.0);
        let ow = xs[2].div_ceil(stride.1);
        let target = rand_tensor(&[xs[0], oh, ow, ks[3]], rng, -1.0, 1.0);
        cases.push(GradCase {
            name,
            tensors: vec![x, k, b],
            f: Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride)?;
                let t = g.input(target.clone());
                g.mse(y, t)
            }),
        });
    }
    {
        let x = rand_tensor(&[4, 3, 5, 4], rng, -2.0, 3.0);
        let gamma = rand_tensor(&[4], rng, 0.5, 1.5);
        let beta = rand_tensor(&[4], rng, -0.5, 0.5);
        let target = rand_tensor(&[4, 3, 5, 4], rng, -1.0, 1.0);
        cases.push(GradCase {
            name: "batchnorm train",
            tensors: vec![x, gamma, beta],
            f: Box::new(move |g, v| {
                let y = g.batch_norm(v[0], v[1], v[2], BnMode::Train, None)?;
                let t = g.input(target.clone());
                g.mse(y, t)
            }),
        });
    }
    {
        let x = rand_tensor(&[4, 3, 5, 4], rng, -2.0, 3.0);
        let gamma = rand_tensor(&[4], rng, 0.5, 1.5);
        let beta = rand_tensor(&[4], rng, -0.5, 0.5);
        let mean = rand_tensor(&[4], rng, -0.5, 0.5);
        let var = rand_tensor(&[4], rng, 0.5, 2.0);
        let target = rand_tensor(&[4, 3, 5, 4], rng, -1.0, 1.0);
        cases.push(GradCase {
            name: "batchnorm eval",
            tensors: vec![x, gamma, beta],
            f: Box::new(move |g, v| {
                let y = g.batch_norm(v[0], v[1], v[2], BnMode::Eval, Some((&mean, &var)))?;
                let t = g.input(target.clone());
                g.mse(y, t)
            }),
        });
    }
    {
        let x = rand_tensor(&[5, 40], rng, -1.0, 1.0);
        let w = rand_tensor(&[40, 7], rng, -0.3, 0.3);
        let b = rand_tensor(&[7], rng, -0.3, 0.3);
        let target = rand_tensor(&[5, 7], rng, -1.0, 1.0);
        cases.push(GradCase {
            name: "dense",
            tensors: vec![x, w, b],
            f: Box::new(move |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                let t = g.input(target.clone());
                g.mse(y, t)
            }),
        });
    }
    {
        let x = rand_away_from_zero(&[6, 50], rng, 0.05, 1.0);
        let target = rand_tensor(&[6, 50], rng, -1.0, 1.0);
        cases.push(GradCase {
            name: "relu",
            tensors: vec![x],
            f: Box::new(move |g, v| {
                let y = g.relu(v[0]);
                let t = g.input(target.clone());
                g.mse(y, t)
            }),
        });
    }
    {
        let a = rand_tensor(&[8, 15], rng, -1.0, 1.0);
        let b = rand_tensor(&[8, 15], rng, -1.0, 1.0);
        let target = rand_tensor(&[8, 15], rng, -1.0, 1.0);
        cases.push(GradCase {
            name: "add",
            tensors: vec![a, b],
            f: Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                let t = g.input(target.clone());
                g.mse(y, t)
            }),
        });
    }
    {
        let x = rand_tensor(&[3, 4, 5, 6], rng, -1.0, 1.0);
        let target = rand_tensor(&[3, 120], rng, -1.0, 1.0);
        cases.push(GradCase {
            name: "flatten",
            tensors: vec![x],
            f: Box::new(move |g, v| {
                let y = g.flatten(v[0])?;
                let t = g.input(target.clone());
                g.mse(y, t)
            }),
        });
    }
    {
        let x = rand_tensor(&[300], rng, -1.0, 1.0);
        let target = rand_tensor(&[300], rng, -1.0, 1.0);
        cases.push(GradCase {
            name: "scale",
            tensors: vec![x],
            f: Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7);
                let t = g.input(target.clone());
                g.mse(y, t)
            }),
        });
    }
    {
        let x = rand_tensor(&[10, 25], rng, -1.0, 1.0);
        cases.push(GradCase {
            name: "sum",
            tensors: vec![x],
            f: Box::new(move |g, v| {
                let s = g.sum(v[0]);
                let t = g.input(Tensor::scalar(0.75));
                g.mse(s, t)
            }),
        });
    }
    {
        let p = rand_tensor(&[60, 2], rng, -3.0, 3.0);
        let l = rand_tensor(&[60, 2], rng, -3.0, 3.0);
        cases.push(GradCase {
            name: "mse (both arguments)",
            tensors: vec![p, l],
            f: Box::new(move |g, v| g.mse(v[0], v[1])),
        });
    }
    cases
}

fn grad_check_arch() -> ArchConfig {
    ArchConfig {
        input_antennas: 8,
        input_subcarriers: 16,
        filters: 4,
        fc_width: 8,
        ..ArchConfig::default()
    }
}

fn model_loss(model: &ModelParams, x: &Tensor, y: &Tensor) -> f64 {
    let env = *model.heads.keys().next().unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let nodes = build_trunk(&mut g, &model.trunk, xv, BnMode::Train, None).unwrap();
    let pred = build_head(&mut g, &model.heads[&env], nodes.z, None).unwrap();
    let yv = g.input(y.clone());
    let loss = g.mse(pred, yv).unwrap();
    g.value(loss).item()
}

fn check_full_model(rng: &mut ChaCha8Rng) -> (f64, usize) {
    let arch = grad_check_arch();
    let model = ModelParams::init(&arch, &[EnvId(1)], 42).unwrap();
    let x = rand_tensor(&[3, 8, 16, 3], rng, 0.0, 1.0);
    let y = rand_tensor(&[3, 2], rng, 0.0, 20.0);
    let n_trunk = model.trunk.trainable().len();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let nodes = build_trunk(&mut g, &model.trunk, xv, BnMode::Train, Some(0)).unwrap();
    let pred = build_head(&mut g, &model.heads[&EnvId(1)], nodes.z, Some(n_trunk)).unwrap();
    let yv = g.input(y.clone());
    let loss = g.mse(pred, yv).unwrap();
    let grads = g.backward(loss).unwrap();

    let sizes: Vec<usize> = model
        .trunk
        .trainable()
        .iter()
        .chain(model.heads[&EnvId(1)].trainable().iter())
        .map(|t| t.len())
        .collect();
    let coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..n).map(move |j| (i, j)))
        .collect();
    let picked = coords.iter().copied().choose_multiple(rng, FD_COORDS);
    let perturbed = |i: usize, j: usize, d: f64| {
        let mut m = model.clone();
        if i < n_trunk {
            m.trunk.trainable_mut()[i].data_mut()[j] += d;
        } else {
            m.heads.get_mut(&EnvId(1)).unwrap().trainable_mut()[i - n_trunk].data_mut()[j] += d;
        }
        model_loss(&m, &x, &y)
    };
    let mut worst: f64 = 0.0;
    for &(i, j) in &picked {
        let analytic = grads.get(i).map(|t| t.data()[j]).unwrap_or(0.0);
        let numeric = (perturbed(i, j, FD_STEP) - perturbed(i, j, -FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    (worst, picked.len())
}

fn criterion_1() -> Res<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0f64, "");
    let mut total = 0;
    let mut failures = Vec::new();
    for case in grad_cases(&mut rng) {
        let (err, n) = check_case(&case, &mut rng);
        total += n;
        if err >= FD_TOL {
            failures.push(format!("{} ({err:.2e})", case.name));
        }
        if err > worst.0 {
            worst = (err, case.name);
        }
    }
    let (err, n) = check_full_model(&mut rng);
    total += n;
    if err >= FD_TOL {
        failures.push(format!("full model ({err:.2e})"));
    }
    if err > worst.0 {
        worst = (err, "full model");
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    Ok(outcome(
        pass,
        format!(
            "max rel err {:.2e} ({}) over {total} coordinates, {secs:.1} s{}",
            worst.0,
            worst.1,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    ))
}

// ---------------------------------------------------------------- criterion 2

/// Small synthetic source datasets sharing one fingerprint shape.
fn small_sources() -> Res<Vec<Dataset>> {
    let mut cfg = ExperimentConfig::from_json(DESK_CONFIG)?;
    cfg.samples_per_env = 200;
    cfg.arch = grad_check_arch();
    let all = build_datasets(&cfg)?;
    Ok(all.into_iter().take(3).collect())
}

fn criterion_2() -> Res<Outcome> {
    let start = Instant::now();
    let data = small_sources()?;
    let arch = grad_check_arch();
    let ids: Vec<EnvId> = data.iter().map(|d| d.env_id).collect();
    let model = ModelParams::init(&arch, &ids, 5)?;
    let cfg = TrainConfig {
        batch_size: 16,
        optimizer: OptimizerConfig::sgd(1.0),
        ..TrainConfig::default()
    };
    let batches: Vec<(Tensor, Tensor)> = data.iter().map(|d| d.batch(&d.train_indices[..16])).collect();

    // Independent per-environment graphs.
    let n_trunk = model.trunk.trainable().len();
    let mut expected: Vec<Vec<f64>> = model.trunk.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut own_head = BTreeMap::new();
    for (ds, (x, y)) in data.iter().zip(&batches) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let nodes = build_trunk(&mut g, &model.trunk, xv, BnMode::Train, Some(0))?;
        let pred = build_head(&mut g, &model.heads[&ds.env_id], nodes.z, Some(n_trunk))?;
        let yv = g.input(y.clone());
        let loss = g.mse(pred, yv)?;
        let grads = g.backward(loss)?;
        for (i, acc) in expected.iter_mut().enumerate() {
            for (a, v) in acc.iter_mut().zip(grads.get(i).unwrap().data()) {
                *a += v;
            }
        }
        let hg: Vec<Tensor> = (0..model.heads[&ds.env_id].trainable().len())
            .map(|j| grads.get(n_trunk + j).unwrap().clone())
            .collect();
        own_head.insert(ds.env_id, hg);
    }

    let mut trainer = Trainer::new(model.clone(), tasks(&data), cfg.clone())?;
    let (step, stats) = trainer.step_gradients(&batches)?;
    let mut max_diff: f64 = 0.0;
    for (got, want) in step.trunk.iter().zip(&expected) {
        for (a, b) in got.data().iter().zip(want) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    // The gradient actually applied: with SGD at lr 1 the update is -grad.
    let before: Vec<Tensor> = trainer.model.trunk.trainable().into_iter().cloned().collect();
    trainer.apply(&step, &stats)?;
    let mut applied_diff: f64 = 0.0;
    for ((b, a), want) in before.iter().zip(trainer.model.trunk.trainable()).zip(&expected) {
        for ((bv, av), w) in b.data().iter().zip(a.data()).zip(want) {
            applied_diff = applied_diff.max(((bv - av) - w).abs());
        }
    }
    let heads_own = data.iter().all(|d| step.heads[&d.env_id] == own_head[&d.env_id]);

    // Replace the batch of the last environment; every other head's update
    // must not move by a single bit (Adam, so moments are exercised too).
    let mut other = batches.clone();
    let last = data.len() - 1;
    other[last] = data[last].batch(&data[last].train_indices[16..32]);
    let adam = TrainConfig {
        optimizer: OptimizerConfig::default(),
        ..cfg
    };
    let mut t1 = Trainer::new(model.clone(), tasks(&data), adam.clone())?;
    let mut t2 = Trainer::new(model, tasks(&data), adam)?;
    let (s1, st1) = t1.step_gradients(&batches)?;
    let (s2, st2) = t2.step_gradients(&other)?;
    t1.apply(&s1, &st1)?;
    t2.apply(&s2, &st2)?;
    let invariant = data[..last].iter().all(|d| {
        bit_equal(&s1.heads[&d.env_id], &s2.heads[&d.env_id])
            && bit_equal_refs(&t1.model.heads[&d.env_id].trainable(), &t2.model.heads[&d.env_id].trainable())
    });
    let changed = t1.model.heads[&data[last].env_id] != t2.model.heads[&data[last].env_id];

    let secs = start.elapsed().as_secs_f64();
    let pass = max_diff <= 1e-12 && applied_diff <= 1e-12 && heads_own && invariant && changed && secs < 60.0;
    Ok(outcome(
        pass,
        format!(
            "trunk grad vs per-env sum max |diff| {max_diff:.1e}, applied update {applied_diff:.1e}; \
             heads use own gradients: {heads_own}; other heads bit-invariant: {invariant}; {secs:.1} s"
        ),
    ))
}

fn tasks(d: &[Dataset]) -> Vec<EnvTask<'_>> {
    d.iter()
        .map(|ds| EnvTask {
            env_id: ds.env_id,
            data: ds,
            train: ds.train_indices.clone(),
        })
        .collect()
}

fn bit_equal(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn bit_equal_refs(a: &[&Tensor], b: &[&Tensor]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn model_bit_equal(a: &ModelParams, b: &ModelParams) -> bool {
    let ta: Vec<(String, &Tensor)> = a.trunk.named_tensors();
    let tb: Vec<(String, &Tensor)> = b.trunk.named_tensors();
    let trunk = ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|((na, x), (nb, y))| na == nb && bit_equal_refs(&[*x], &[*y]));
    let heads = a.heads.len() == b.heads.len()
        && a.heads.iter().zip(&b.heads).all(|((ia, ha), (ib, hb))| {
            ia == ib && bit_equal_refs(&ha.trainable(), &hb.trainable())
        });
    trunk && heads && a.arch == b.arch
}

// ---------------------------------------------------------------- criterion 3

/// Plain single-environment training loop written out step by step.
fn reference_training(ds: &Dataset, arch: &ArchConfig, cfg: &TrainConfig) -> ModelParams {
    let mut model = ModelParams::init(arch, &[ds.env_id], cfg.seed).unwrap();
    let n_trunk = model.trunk.trainable().len();
    let shapes: Vec<Vec<usize>> = model
        .trunk
        .trainable()
        .iter()
        .chain(model.heads[&ds.env_id].trainable().iter())
        .map(|t| t.shape().to_vec())
        .collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &refs);
    let bs = cfg.batch_size;
    for epoch in 0..cfg.epochs {
        let mut order = ds.train_indices.clone();
        order.shuffle(&mut rng_for(cfg.seed, &[tag::SHUFFLE, epoch as u64, ds.env_id.0 as u64]));
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = ds.batch(chunk);
            let (grads, stats) = {
                let mut g = Graph::new();
                let xv = g.input(x);
                let nodes = build_trunk(&mut g, &model.trunk, xv, BnMode::Train, Some(0)).unwrap();
                let pred = build_head(&mut g, &model.heads[&ds.env_id], nodes.z, Some(n_trunk)).unwrap();
                let yv = g.input(y);
                let loss = g.mse(pred, yv).unwrap();
                let grads = g.backward(loss).unwrap();
                let all: Vec<Tensor> = (0..shapes.len()).map(|i| grads.get(i).unwrap().clone()).collect();
                (all, nodes.batch_stats(&g))
            };
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
            let mut params = model.trunk.trainable_mut();
            let head = model.heads.get_mut(&ds.env_id).unwrap();
            params.extend(head.trainable_mut());
            opt.step(&mut params, &grad_refs).unwrap();
            model.trunk.update_running_stats(&stats);
        }
    }
    model
}

fn criterion_3() -> Res<Outcome> {
    let start = Instant::now();
    let data = small_sources()?;
    let arch = grad_check_arch();
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 3,
        seed: 77,
        ..TrainConfig::default()
    };
    let (meta, _) = meta_train(&[&data[0]], &arch, &cfg)?;
    let (sep, _) = train_separate(&data[0], &arch, &cfg)?;
    let reference = reference_training(&data[0], &arch, &cfg);
    let same_sep = model_bit_equal(&meta, &sep);
    let same_ref = model_bit_equal(&meta, &reference);
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        same_sep && same_ref,
        format!(
            "meta_train(N=1) == train_separate bitwise: {same_sep}; == hand-written loop bitwise: {same_ref}; {secs:.1} s"
        ),
    ))
}

// ---------------------------------------------------------------- criterion 4

/// Weight count written out layer by layer for the default architecture.
fn default_counts_by_hand() -> (usize, usize) {
    let (f, k) = (32, 4 * 4);
    let block = |cin: usize| {
        let conv1 = k * cin * f + f;
        let bn = 2 * f;
        let conv2 = k * f * f + f;
        let skip = cin * f + f;
        conv1 + bn + conv2 + bn + skip
    };
    // 32x52 input, stride (1, 4) twice: 52 -> 13 -> 4 columns.
    let flatten = 32 * 4 * f;
    let trunk = block(3) + block(f) + flatten * 128 + 128;
    let head = 2 * (128 * 128 + 128) + 128 * 2 + 2;
    (trunk, head)
}

fn criterion_4() -> Res<Outcome> {
    let arch = ArchConfig::default();
    let model = ModelParams::init(&arch, &[EnvId(1)], 0)?;
    let trunk = model.trunk.num_weights();
    let head = model.heads[&EnvId(1)].num_weights();
    let (hand_trunk, hand_head) = default_counts_by_hand();
    let frac = trunk as f64 / (trunk + head) as f64;
    let pass = (0.90..=0.96).contains(&frac) && trunk == hand_trunk && head == hand_head;
    Ok(outcome(
        pass,
        format!(
            "trunk {trunk} + head {head} weights, trunk fraction {:.2}% (hand count {hand_trunk} + {hand_head})",
            100.0 * frac
        ),
    ))
}

// ---------------------------------------------------------------- criteria 5-8

struct Desk {
    cfg: ExperimentConfig,
    sources: Vec<Dataset>,
    target: Dataset,
}

fn desk() -> Res<Desk> {
    let cfg = ExperimentConfig::from_json(DESK_CONFIG)?;
    let mut all = build_datasets(&cfg)?;
    let target_id = cfg.target().ok_or("desk config lacks a target")?;
    let pos = all.iter().position(|d| d.env_id == target_id).unwrap();
    let target = all.remove(pos);
    all.sort_by_key(|d| d.env_id);
    Ok(Desk {
        cfg,
        sources: all,
        target,
    })
}

impl Desk {
    fn train_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.cfg.train.clone()
        }
    }

    fn seeds(&self) -> &[u64] {
        &self.cfg.curve.seeds
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Criterion 5, returning the trunks it trained keyed `(N, seed)`.
fn criterion_5(d: &Desk) -> Res<(Outcome, BTreeMap<(usize, u64), TrunkParams>)> {
    let start = Instant::now();
    let n = d.sources.len();
    let mut trunks = BTreeMap::new();
    let mut sep: BTreeMap<EnvId, Vec<f64>> = BTreeMap::new();
    let mut joint: BTreeMap<EnvId, Vec<f64>> = BTreeMap::new();
    let refs: Vec<&Dataset> = d.sources.iter().collect();
    for &seed in d.seeds() {
        let cfg = d.train_cfg(seed);
        for (i, ds) in d.sources.iter().enumerate() {
            let (m, _) = train_separate(ds, &d.cfg.arch, &cfg)?;
            sep.entry(ds.env_id).or_default().push(evaluate(&m, ds.env_id, ds, &ds.test_indices)?);
            if i == 0 {
                // Separate training on the first source is the N=1 source run.
                trunks.insert((1, seed), m.trunk);
            }
        }
        let (m, _) = meta_train(&refs, &d.cfg.arch, &cfg)?;
        for ds in &d.sources {
            joint.entry(ds.env_id).or_default().push(evaluate(&m, ds.env_id, ds, &ds.test_indices)?);
        }
        trunks.insert((n, seed), m.trunk);
    }
    let mut wins = 0;
    let mut cells = Vec::new();
    for ds in &d.sources {
        let (s, j) = (mean(&sep[&ds.env_id]), mean(&joint[&ds.env_id]));
        if j <= s {
            wins += 1;
        }
        cells.push(format!("env{} sep {s:.3} / joint {j:.3}", ds.env_id));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = wins >= 3 && secs < 900.0;
    Ok((
        outcome(
            pass,
            format!("joint <= separate on {wins}/{n} envs [{}]; {secs:.0} s", cells.join(", ")),
        ),
        trunks,
    ))
}

fn curve_spec(d: &Desk) -> CurveSpec {
    CurveSpec {
        constrained: false,
        ..d.cfg.curve.clone()
    }
}

fn criterion_6(d: &Desk, trunks: &mut BTreeMap<(usize, u64), TrunkParams>) -> Res<(Outcome, EvalReport)> {
    let start = Instant::now();
    let spec = curve_spec(d);
    let refs: Vec<&Dataset> = d.sources.iter().collect();
    for &n in &spec.n_sources {
        for &seed in &spec.seeds {
            if !trunks.contains_key(&(n, seed)) {
                let t = source_trunk(&refs, n, seed, &d.cfg.arch, &d.cfg.train, &spec)?;
                trunks.insert((n, seed), t);
            }
        }
    }
    let report = run_curve_from_trunks(trunks, &d.target, &spec, &d.cfg.arch, &d.cfg.train)?;
    let n_max = *spec.n_sources.iter().max().unwrap();
    let k_min = *spec.target_samples.iter().min().unwrap();
    let k_max = *spec.target_samples.iter().max().unwrap();
    let me = |n, k, m| report.mean_me(n, k, m).unwrap();
    let (a, b, c) = (
        me(n_max, k_min, TransferMode::Finetune),
        me(1, k_min, TransferMode::Finetune),
        me(1, k_min, TransferMode::Scratch),
    );
    let (e, f) = (me(n_max, k_max, TransferMode::Finetune), me(1, k_max, TransferMode::Scratch));
    let secs = start.elapsed().as_secs_f64();
    let pass = a < b && b < c && e <= f && report.all_finite() && secs < 900.0;
    Ok((
        outcome(
            pass,
            format!(
                "k={k_min}: N={n_max} {a:.3} < N=1 {b:.3} < scratch {c:.3}; \
                 k={k_max}: N={n_max} {e:.3} <= scratch {f:.3}; {} rows; {secs:.0} s",
                report.rows.len()
            ),
        ),
        report,
    ))
}

fn criterion_7(d: &Desk, report: &EvalReport) -> Res<Outcome> {
    let spec = curve_spec(d);
    let mut violations = Vec::new();
    let mut inversions = Vec::new();
    let mut lines = Vec::new();
    for &k in &spec.target_samples {
        let mut pct = Vec::new();
        for &n in &spec.n_sources {
            let fr = report.mean_me(n, k, TransferMode::Freeze).unwrap();
            let ft = report.mean_me(n, k, TransferMode::Finetune).unwrap();
            if fr < ft {
                violations.push(format!("N={n} k={k}"));
            }
            pct.push(percent_increase(fr, ft)?);
        }
        for w in pct.windows(2) {
            if w[1] > w[0] {
                inversions.push(w[1] - w[0]);
            }
        }
        lines.push(format!(
            "k={k}: {}",
            pct.iter().map(|p| format!("{p:.1}%")).collect::<Vec<_>>().join(" ")
        ));
    }
    let trend_ok = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 2.0);
    let pass = violations.is_empty() && trend_ok;
    Ok(outcome(
        pass,
        format!(
            "freeze < finetune in {} cells{}; {} inversion(s) of percent increase in N [{}]",
            violations.len(),
            if violations.is_empty() {
                String::new()
            } else {
                format!(" ({})", violations.join(", "))
            },
            inversions.len(),
            lines.join("; ")
        ),
    ))
}

fn criterion_8(d: &Desk, trunks: &BTreeMap<(usize, u64), TrunkParams>) -> Res<Outcome> {
    let start = Instant::now();
    let spec = CurveSpec {
        constrained: true,
        ..d.cfg.curve.clone()
    };
    let refs: Vec<&Dataset> = d.sources.iter().collect();
    let k = *spec.target_samples.iter().min().unwrap();
    let n_s = d.sources[0].train_indices.len();
    let consumed_1 = source_sample_count(&refs, 1, &d.cfg.train, &spec)?;
    let consumed_2 = source_sample_count(&refs, 2, &d.cfg.train, &spec)?;
    let mut me1 = Vec::new();
    let mut me2 = Vec::new();
    for &seed in &spec.seeds {
        // With one source the constrained budget is the whole pool, so the
        // unconstrained N=1 trunk is the same run.
        let t1 = &trunks[&(1, seed)];
        let t2 = source_trunk(&refs, 2, seed, &d.cfg.arch, &d.cfg.train, &spec)?;
        let cfg = d.train_cfg(seed);
        me1.push(transfer_train(Some(t1), &d.target, k, TransferMode::Finetune, &d.cfg.arch, &cfg)?.test_me_m);
        me2.push(transfer_train(Some(&t2), &d.target, k, TransferMode::Finetune, &d.cfg.arch, &cfg)?.test_me_m);
    }
    let (a, b) = (mean(&me2), mean(&me1));
    let secs = start.elapsed().as_secs_f64();
    let budget_ok = consumed_1 == n_s && consumed_2 == n_s;
    Ok(outcome(
        a < b && budget_ok,
        format!(
            "k={k}: constrained N=2 {a:.3} < N=1 {b:.3}; source samples used N=1 {consumed_1}, N=2 {consumed_2} (N_S {n_s}); {secs:.0} s"
        ),
    ))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Res<Outcome> {
    let radio = RadioConfig::default();
    // -174 dBm/Hz + 2 dB over 100 MHz / 1024 subcarriers, relative to 23 dBm.
    let noise_dbm = -174.0 + 2.0 + 10.0 * (100e6f64 / 1024.0).log10();
    let hand = 10f64.powf((noise_dbm - 23.0) / 10.0);
    let sigma2 = radio.noise_variance();
    let draws = 100_000;
    let zero = RawCsi {
        n_rx: 1,
        n_tx: 1,
        n_sub: draws,
        entries: vec![Complex64::new(0.0, 0.0); draws],
        ue_position: [0.0, 0.0],
        env_id: EnvId(0),
        no_paths: false,
    };
    let noisy = apply_noise(&zero, &radio, 9);
    let m: Complex64 = noisy.entries.iter().sum::<Complex64>() / draws as f64;
    let var = noisy.entries.iter().map(|e| (e - m).norm_sqr()).sum::<f64>() / (draws as f64 - 1.0);
    let rel = (var - sigma2).abs() / sigma2;
    let hand_rel = (sigma2 - hand).abs() / hand;
    Ok(outcome(
        rel < 0.01 && hand_rel < 1e-12,
        format!(
            "sigma^2 {sigma2:.6e} (hand {hand:.6e}), empirical {var:.6e} over {draws} draws, rel dev {:.3}%",
            100.0 * rel
        ),
    ))
}

// ---------------------------------------------------------------- criterion 10

fn run_pipeline(out: &Path) -> Res<BTreeMap<String, Vec<u8>>> {
    let bin = env!("CARGO_BIN_EXE_metaloc");
    for stage in ["gen-data", "train", "meta-train", "transfer", "curve", "report"] {
        let status = Command::new(bin)
            .arg(stage)
            .arg("--config")
            .arg(SMOKE_CONFIG)
            .arg("--out")
            .arg(out)
            .env("RUST_LOG", "warn")
            .status()?;
        if !status.success() {
            return Err(format!("{stage} exited with {status}").into());
        }
    }
    let mut files = BTreeMap::new();
    for entry in walk(out)? {
        let rel = entry.strip_prefix(out)?.display().to_string();
        if rel.ends_with(".csv") || rel.ends_with(".svg") || rel.ends_with(".ckpt") || rel.ends_with(".f32") {
            files.insert(rel, std::fs::read(&entry)?);
        }
    }
    Ok(files)
}

fn walk(dir: &Path) -> Res<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            out.extend(walk(&p)?);
        } else {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn criterion_10() -> Res<Outcome> {
    let start = Instant::now();
    let tmp = tempfile::tempdir()?;
    let a = run_pipeline(&tmp.path().join("a"))?;
    let b = run_pipeline(&tmp.path().join("b"))?;
    let csvs = a.keys().filter(|k| k.ends_with(".csv")).count();
    let identical = a == b && csvs > 0;

    let ckpt_path = tmp.path().join("a/meta/joint_seed0.ckpt");
    let loaded = load_checkpoint(&ckpt_path)?;
    let resaved = tmp.path().join("resaved.ckpt");
    save_checkpoint(&loaded, &resaved)?;
    let bytes_same = std::fs::read(&ckpt_path)? == std::fs::read(&resaved)?;
    let model = loaded.into_model()?;
    let again = load_checkpoint(&resaved)?.into_model()?;
    let round_trip = bytes_same && model_bit_equal(&model, &again) && {
        let mut bn_equal = true;
        for ((_, x), (_, y)) in model.trunk.named_tensors().iter().zip(again.trunk.named_tensors().iter()) {
            bn_equal &= bit_equal_refs(&[*x], &[*y]);
        }
        bn_equal
    };
    let fresh = Checkpoint::from_model(&ModelParams::init(&grad_check_arch(), &[EnvId(2)], 1)?);
    let fresh_ok = Checkpoint::decode(&fresh.encode()?)? == fresh;
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        identical && round_trip && fresh_ok,
        format!(
            "two full pipeline runs byte-identical over {} files ({csvs} CSVs): {identical}; \
             checkpoint round trip bit-exact: {}; {secs:.1} s",
            a.len(),
            round_trip && fresh_ok
        ),
    ))
}

// ---------------------------------------------------------------- driver

fn report(n: usize, name: &str, r: Res<Outcome>) -> bool {
    match r {
        Ok(o) => {
            println!("criterion {n:>2} {name}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("criterion {n:>2} {name}: FAIL - error: {e}");
            false
        }
    }
}

fn main() {
    let start = Instant::now();
    let mut ok = true;
    ok &= report(1, "gradient oracle", criterion_1());
    ok &= report(2, "summed trunk gradient", criterion_2());
    ok &= report(3, "single-environment degeneracy", criterion_3());
    ok &= report(4, "weight split", criterion_4());

    match desk() {
        Ok(d) => {
            let (r5, trunks) = match criterion_5(&d) {
                Ok((o, t)) => (Ok(o), Some(t)),
                Err(e) => (Err(e), None),
            };
            ok &= report(5, "joint vs separate", r5);
            match trunks {
                Some(mut trunks) => {
                    let (r6, rep) = match criterion_6(&d, &mut trunks) {
                        Ok((o, rep)) => (Ok(o), Some(rep)),
                        Err(e) => (Err(e), None),
                    };
                    ok &= report(6, "transfer ordering", r6);
                    ok &= report(
                        7,
                        "freeze vs fine-tune",
                        rep.as_ref().map(|r| criterion_7(&d, r)).unwrap_or_else(|| Err("no curve".into())),
                    );
                    ok &= report(8, "constrained sources", criterion_8(&d, &trunks));
                }
                None => {
                    for (n, name) in [(6, "transfer ordering"), (7, "freeze vs fine-tune"), (8, "constrained sources")] {
                        ok &= report(n, name, Err("source training failed".into()));
                    }
                }
            }
        }
        Err(e) => {
            for (n, name) in [
                (5, "joint vs separate"),
                (6, "transfer ordering"),
                (7, "freeze vs fine-tune"),
                (8, "constrained sources"),
            ] {
                ok &= report(n, name, Err(format!("desk data: {e}").into()));
            }
        }
    }

    ok &= report(9, "noise calibration", criterion_9());
    ok &= report(10, "determinism and persistence", criterion_10());
    println!(
        "acceptance: {} in {:.0} s",
        if ok { "all criteria PASS" } else { "FAILED" },
        start.elapsed().as_secs_f64()
    );
    if !ok {
        std::process::exit(1);
    }
}
