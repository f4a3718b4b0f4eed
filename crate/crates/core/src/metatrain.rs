//! Multi-environment training of a shared trunk with per-environment heads.
//!
//! Every step draws one batch per environment (ascending `EnvId` order),
//! takes each environment's MSE through the shared trunk and its own head,
//! sums the trunk gradients over environments and applies a single optimizer
//! step to the trunk and all heads. With one environment this is ordinary
//! supervised training, which is how [`train_separate`] is implemented.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Graph, OptimizerConfig, OptimizerState, Tensor};
use crate::channel_sim::EnvId;
use crate::error::{Error, Result};
use crate::fingerprint::Dataset;
use crate::model::{build_head, build_trunk, ArchConfig, ModelParams};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Per-environment training budget `N_S`; `None` uses the whole split.
    pub per_env_budget: Option<usize>,
    /// Divide the budget across environments (`N_S / N` each).
    pub constrained: bool,
    /// Evaluate test ME every this many epochs; 0 disables per-epoch evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 50,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            per_env_budget: None,
            constrained: false,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (batchnorm)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub env_id: EnvId,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub test_me_m: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.records.iter().map(|r| r.epoch + 1).max().unwrap_or(0)
    }

    pub fn losses(&self, env_id: EnvId) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.env_id == env_id)
            .map(|r| r.train_loss)
            .collect()
    }

    /// Writes `epoch,env_id,train_loss,test_me_m,seconds`. With
    /// `with_timings = false` the seconds column is written as 0 so reruns
    /// are byte-identical.
    pub fn write_csv<W: Write>(&self, w: W, with_timings: bool) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "env_id", "train_loss", "test_me_m", "seconds"])?;
        for r in &self.records {
            out.write_record([
                r.epoch.to_string(),
                r.env_id.to_string(),
                format!("{:.9e}", r.train_loss),
                r.test_me_m.map(|v| format!("{v:.6}")).unwrap_or_default(),
                format!("{:.3}", if with_timings { r.seconds } else { 0.0 }),
            ])?;
        }
        out.flush().map_err(|e| Error::io("history csv", e))?;
        Ok(())
    }
}

/// One environment's share of a training run.
#[derive(Debug, Clone)]
pub struct EnvTask<'d> {
    pub env_id: EnvId,
    pub data: &'d Dataset,
    /// Training indices in pool order.
    pub train: Vec<usize>,
}

/// Gradients of a single step, as applied.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    /// Sum over environments of the trunk gradients, in trainable order.
    pub trunk: Vec<Tensor>,
    pub heads: BTreeMap<EnvId, Vec<Tensor>>,
    pub losses: BTreeMap<EnvId, f64>,
}

/// Trains the trunk and every head of `model` on `tasks`.
pub struct Trainer<'d> {
    pub model: ModelParams,
    pub tasks: Vec<EnvTask<'d>>,
    pub cfg: TrainConfig,
    pub optimizer: OptimizerState,
}

impl<'d> Trainer<'d> {
    pub fn new(model: ModelParams, mut tasks: Vec<EnvTask<'d>>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(Error::config("training needs at least one environment"));
        }
        tasks.sort_by_key(|t| t.env_id);
        let shape = (tasks[0].data.n_rows, tasks[0].data.n_sub);
        for t in &tasks {
            if (t.data.n_rows, t.data.n_sub) != shape {
                return Err(Error::config("all environments must share the fingerprint shape"));
            }
            if t.train.len() < 2 {
                return Err(Error::config(format!(
                    "environment {} has fewer than 2 training samples",
                    t.env_id
                )));
            }
            if !model.heads.contains_key(&t.env_id) {
                return Err(Error::config(format!("model lacks a head for {}", t.env_id)));
            }
        }
        if shape != (model.arch.input_antennas, model.arch.input_subcarriers) {
            return Err(Error::config(format!(
                "fingerprints are {}x{} but the architecture expects {}x{}",
                shape.0, shape.1, model.arch.input_antennas, model.arch.input_subcarriers
            )));
        }
        let optimizer = OptimizerState::new_for_shapes(cfg.optimizer.clone(), &slot_shapes(&model, &tasks));
        Ok(Self {
            model,
            tasks,
            cfg,
            optimizer,
        })
    }

    /// Number of steps per epoch: the batch count of the smallest
    /// environment, ignoring a trailing batch of one sample.
    pub fn batches_per_epoch(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| batch_count(t.train.len(), self.cfg.batch_size))
            .min()
            .unwrap_or(0)
    }

    /// Shuffled training order of task `i` for `epoch`.
    pub fn epoch_order(&self, i: usize, epoch: usize) -> Vec<usize> {
        let t = &self.tasks[i];
        let mut order = t.train.clone();
        let mut rng = rng::rng_for(self.cfg.seed, &[tag::SHUFFLE, epoch as u64, t.env_id.0 as u64]);
        order.shuffle(&mut rng);
        order
    }

    /// Forward/backward for one batch per environment; `batches` follows the
    /// task order.
    pub fn step_gradients(&self, batches: &[(Tensor, Tensor)]) -> Result<(StepGradients, Vec<Vec<crate::autodiff::BatchStats>>)> {
        if batches.len() != self.tasks.len() {
            return Err(Error::contract("one batch per environment required"));
        }
        let trunk = &self.model.trunk;
        let n_trunk = trunk.trainable().len();
        let mut trunk_sum: Vec<Option<Tensor>> = vec![None; n_trunk];
        let mut heads = BTreeMap::new();
        let mut losses = BTreeMap::new();
        let mut stats = Vec::with_capacity(self.tasks.len());
        for (task, (x, y)) in self.tasks.iter().zip(batches) {
            let head = self.model.head(task.env_id)?;
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let nodes = build_trunk(&mut g, trunk, xv, BnMode::Train, Some(0))?;
            let pred = build_head(&mut g, head, nodes.z, Some(n_trunk))?;
            let yv = g.input(y.clone());
            let loss = g.mse(pred, yv)?;
            let mut grads = g.backward(loss)?;
            losses.insert(task.env_id, g.value(loss).item());
            stats.push(nodes.batch_stats(&g));
            for (i, acc) in trunk_sum.iter_mut().enumerate() {
                let gi = grads
                    .take(i)
                    .ok_or_else(|| Error::contract("missing trunk gradient"))?;
                match acc {
                    Some(a) => a.add_assign(&gi),
                    None => *acc = Some(gi),
                }
            }
            let n_head = head.trainable().len();
            let hg = (0..n_head)
                .map(|j| {
                    grads
                        .take(n_trunk + j)
                        .ok_or_else(|| Error::contract("missing head gradient"))
                })
                .collect::<Result<Vec<_>>>()?;
            heads.insert(task.env_id, hg);
        }
        let trunk = trunk_sum.into_iter().map(|t| t.expect("filled")).collect();
        Ok((StepGradients { trunk, heads, losses }, stats))
    }

    /// Applies `grads` with one optimizer step and folds batch statistics
    /// into the trunk's running estimates in environment order.
    pub fn apply(&mut self, grads: &StepGradients, stats: &[Vec<crate::autodiff::BatchStats>]) -> Result<()> {
        let mut grad_refs: Vec<Option<&Tensor>> = grads.trunk.iter().map(Some).collect();
        for t in &self.tasks {
            let hg = grads
                .heads
                .get(&t.env_id)
                .ok_or_else(|| Error::contract("missing head gradients"))?;
            grad_refs.extend(hg.iter().map(Some));
        }
        let mut params: Vec<&mut Tensor> = self.model.trunk.trainable_mut();
        let ids: Vec<EnvId> = self.tasks.iter().map(|t| t.env_id).collect();
        {
            let mut heads: Vec<(&EnvId, &mut crate::model::HeadParams)> = self
                .model
                .heads
                .iter_mut()
                .filter(|(id, _)| ids.contains(id))
                .collect();
            heads.sort_by_key(|(id, _)| **id);
            for (_, h) in heads {
                params.extend(h.trainable_mut());
            }
            self.optimizer.step(&mut params, &grad_refs)?;
        }
        for s in stats {
            self.model.trunk.update_running_stats(s);
        }
        Ok(())
    }

    /// Runs training to completion.
    pub fn run(mut self) -> Result<(ModelParams, TrainHistory)> {
        let mut history = TrainHistory::default();
        let bs = self.cfg.batch_size;
        for epoch in 0..self.cfg.epochs {
            let start = Instant::now();
            let orders: Vec<Vec<usize>> = (0..self.tasks.len()).map(|i| self.epoch_order(i, epoch)).collect();
            let mut loss_sums = vec![0.0; self.tasks.len()];
            let n_batches = self.batches_per_epoch();
            for b in 0..n_batches {
                let batches: Vec<(Tensor, Tensor)> = self
                    .tasks
                    .iter()
                    .zip(&orders)
                    .map(|(t, order)| {
                        let end = ((b + 1) * bs).min(order.len());
                        t.data.batch(&order[b * bs..end])
                    })
                    .collect();
                let (grads, stats) = self.step_gradients(&batches)?;
                for (i, t) in self.tasks.iter().enumerate() {
                    loss_sums[i] += grads.losses[&t.env_id];
                }
                self.apply(&grads, &stats)?;
            }
            let evaluate_now = self.cfg.eval_every > 0 && (epoch + 1) % self.cfg.eval_every == 0;
            let seconds = start.elapsed().as_secs_f64();
            for (i, t) in self.tasks.iter().enumerate() {
                let test_me_m = if evaluate_now {
                    Some(evaluate(&self.model, t.env_id, t.data, &t.data.test_indices)?)
                } else {
                    None
                };
                let train_loss = loss_sums[i] / n_batches as f64;
                if !train_loss.is_finite() {
                    return Err(Error::contract(format!(
                        "training diverged for environment {} at epoch {epoch}",
                        t.env_id
                    )));
                }
                history.records.push(EpochRecord {
                    epoch,
                    env_id: t.env_id,
                    train_loss,
                    test_me_m,
                    seconds,
                });
            }
        }
        Ok((self.model, history))
    }
}

fn slot_shapes(model: &ModelParams, tasks: &[EnvTask<'_>]) -> Vec<Vec<usize>> {
    let mut shapes: Vec<Vec<usize>> = model.trunk.trainable().iter().map(|t| t.shape().to_vec()).collect();
    for t in tasks {
        if let Some(h) = model.heads.get(&t.env_id) {
            shapes.extend(h.trainable().iter().map(|t| t.shape().to_vec()));
        }
    }
    shapes
}

impl OptimizerState {
    fn new_for_shapes(config: OptimizerConfig, shapes: &[Vec<usize>]) -> Self {
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        OptimizerState::new(config, &refs)
    }
}

/// Batches per pass over `n` samples, dropping a trailing batch of size 1.
pub fn batch_count(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    if n % batch_size >= 2 {
        full + 1
    } else {
        full
    }
}

/// Training indices for each dataset under the configured budget.
pub fn budgeted_tasks<'d>(datasets: &[&'d Dataset], cfg: &TrainConfig) -> Result<Vec<EnvTask<'d>>> {
    if datasets.is_empty() {
        return Err(Error::config("at least one source environment is required"));
    }
    let n = datasets.len();
    let mut ids: Vec<EnvId> = datasets.iter().map(|d| d.env_id).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != n {
        return Err(Error::config("source environments must be distinct"));
    }
    datasets
        .iter()
        .map(|d| {
            if d.is_empty() || d.train_indices.is_empty() {
                return Err(Error::config(format!("dataset for {} is empty", d.env_id)));
            }
            let mut budget = cfg.per_env_budget.unwrap_or(d.train_indices.len());
            if cfg.constrained {
                budget /= n;
            }
            Ok(EnvTask {
                env_id: d.env_id,
                data: *d,
                train: d.train_subset(budget)?.to_vec(),
            })
        })
        .collect()
}

/// Joint training over `datasets` with a shared trunk and one head each.
pub fn meta_train(
    datasets: &[&Dataset],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let tasks = budgeted_tasks(datasets, cfg)?;
    let ids: Vec<EnvId> = tasks.iter().map(|t| t.env_id).collect();
    let model = ModelParams::init(arch, &ids, cfg.seed)?;
    Trainer::new(model, tasks, cfg.clone())?.run()
}

/// Ordinary single-environment training of trunk and head.
pub fn train_separate(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    meta_train(&[dataset], arch, cfg)
}

/// Mean Euclidean distance between predicted and true positions, `[B, 2]` each.
pub fn mean_euclidean_error(pred: &Tensor, labels: &Tensor) -> Result<f64> {
    if pred.shape() != labels.shape() || pred.shape().len() != 2 || pred.shape()[1] != 2 {
        return Err(Error::shape("predictions and labels must both be [B, 2]"));
    }
    if pred.is_empty() {
        return Err(Error::contract("mean error of an empty set"));
    }
    let n = pred.shape()[0];
    let total: f64 = pred
        .data()
        .chunks_exact(2)
        .zip(labels.data().chunks_exact(2))
        .map(|(p, l)| (p[0] - l[0]).hypot(p[1] - l[1]))
        .sum();
    Ok(total / n as f64)
}

pub const EVAL_CHUNK: usize = 256;

/// Mean error (meters) of `model`'s head `env_id` on `indices` of `data`.
pub fn evaluate(model: &ModelParams, env_id: EnvId, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::contract("evaluation needs a non-empty test split"));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let pred = model.predict(env_id, &x)?;
        total += mean_euclidean_error(&pred, &y)? * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}
