//! Residual CNN for CSI positioning, split into an environment-independent
//! trunk (residual blocks plus the first dense layer) and per-environment
//! heads (the remaining dense layers and the 2-D output map).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, Graph, ParamId, Tensor, Var};
use crate::channel_sim::EnvId;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub mod checkpoint;

pub const BN_MOMENTUM: f64 = 0.1;
pub const FINGERPRINT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Rows of the input fingerprint (`N_A`).
    pub input_antennas: usize,
    /// Columns of the input fingerprint (`N_C`).
    pub input_subcarriers: usize,
    pub num_residual_blocks: usize,
    pub filters: usize,
    pub kernel: [usize; 2],
    /// Stride of the second convolution (and the skip projection) of each block.
    pub block_stride: [usize; 2],
    pub fc_width: usize,
    pub trunk_fc_layers: usize,
    pub head_fc_layers: usize,
    pub output_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_antennas: 32,
            input_subcarriers: 52,
            num_residual_blocks: 2,
            filters: 32,
            kernel: [4, 4],
            block_stride: [1, 4],
            fc_width: 128,
            trunk_fc_layers: 1,
            head_fc_layers: 2,
            output_dim: 2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.input_antennas,
            self.input_subcarriers,
            self.num_residual_blocks,
            self.filters,
            self.kernel[0],
            self.kernel[1],
            self.block_stride[0],
            self.block_stride[1],
            self.fc_width,
            self.trunk_fc_layers,
            self.head_fc_layers,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::config("architecture counts must all be at least 1"));
        }
        if self.output_dim != 2 {
            return Err(Error::config("output_dim must be 2 (planar positions)"));
        }
        Ok(())
    }

    /// Spatial size `(antennas, subcarriers)` after every residual block.
    pub fn block_output_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_residual_blocks);
        let (mut h, mut w) = (self.input_antennas, self.input_subcarriers);
        for _ in 0..self.num_residual_blocks {
            h = h.div_ceil(self.block_stride[0]);
            w = w.div_ceil(self.block_stride[1]);
            dims.push((h, w));
        }
        dims
    }

    pub fn flatten_len(&self) -> usize {
        let (h, w) = *self.block_output_dims().last().expect("at least one block");
        h * w * self.filters
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[Kh, Kw, Cin, Cout]`.
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[in, out]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockParams {
    pub conv1: ConvParams,
    pub bn1: BatchNormParams,
    pub conv2: ConvParams,
    pub bn2: BatchNormParams,
    /// 1x1 projection on the skip path, same stride as `conv2`.
    pub skip: ConvParams,
}

/// Environment-independent feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkParams {
    /// Stride of each block's downsampling convolution and skip projection.
    pub block_stride: [usize; 2],
    pub blocks: Vec<ResidualBlockParams>,
    pub fc: Vec<DenseParams>,
}

/// Environment-specific position regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Vec<DenseParams>,
    pub output: DenseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub trunk: TrunkParams,
    pub heads: BTreeMap<EnvId, HeadParams>,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl ConvParams {
    fn init(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            kernel: he_uniform(&[kh, kw, cin, cout], kh * kw * cin, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

impl BatchNormParams {
    fn init(c: usize) -> Self {
        Self {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], 1.0),
        }
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats, momentum: f64) {
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

impl DenseParams {
    fn init(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: he_uniform(&[n_in, n_out], n_in, rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }
}

impl TrunkParams {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::rng_for(seed, &[tag::TRUNK_INIT]);
        let [kh, kw] = arch.kernel;
        let f = arch.filters;
        let mut blocks = Vec::with_capacity(arch.num_residual_blocks);
        let mut cin = FINGERPRINT_CHANNELS;
        for _ in 0..arch.num_residual_blocks {
            blocks.push(ResidualBlockParams {
                conv1: ConvParams::init(kh, kw, cin, f, &mut rng),
                bn1: BatchNormParams::init(f),
                conv2: ConvParams::init(kh, kw, f, f, &mut rng),
                bn2: BatchNormParams::init(f),
                skip: ConvParams::init(1, 1, cin, f, &mut rng),
            });
            cin = f;
        }
        let mut fc = Vec::with_capacity(arch.trunk_fc_layers);
        let mut n_in = arch.flatten_len();
        for _ in 0..arch.trunk_fc_layers {
            fc.push(DenseParams::init(n_in, arch.fc_width, &mut rng));
            n_in = arch.fc_width;
        }
        Ok(Self {
            block_stride: arch.block_stride,
            blocks,
            fc,
        })
    }

    /// Trainable tensors in binding order.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([
                &b.conv1.kernel,
                &b.conv1.bias,
                &b.bn1.gamma,
                &b.bn1.beta,
                &b.conv2.kernel,
                &b.conv2.bias,
                &b.bn2.gamma,
                &b.bn2.beta,
                &b.skip.kernel,
                &b.skip.bias,
            ]);
        }
        for d in &self.fc {
            out.extend([&d.weight, &d.bias]);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([
                &mut b.conv1.kernel,
                &mut b.conv1.bias,
                &mut b.bn1.gamma,
                &mut b.bn1.beta,
                &mut b.conv2.kernel,
                &mut b.conv2.bias,
                &mut b.bn2.gamma,
                &mut b.bn2.beta,
                &mut b.skip.kernel,
                &mut b.skip.bias,
            ]);
        }
        for d in &mut self.fc {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        out
    }

    /// Every tensor, trainable or not, with a stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("trunk.block{i}");
            for (name, conv) in [("conv1", &b.conv1), ("conv2", &b.conv2), ("skip", &b.skip)] {
                out.push((format!("{p}.{name}.kernel"), &conv.kernel));
                out.push((format!("{p}.{name}.bias"), &conv.bias));
            }
            for (name, bn) in [("bn1", &b.bn1), ("bn2", &b.bn2)] {
                out.push((format!("{p}.{name}.gamma"), &bn.gamma));
                out.push((format!("{p}.{name}.beta"), &bn.beta));
                out.push((format!("{p}.{name}.running_mean"), &bn.running_mean));
                out.push((format!("{p}.{name}.running_var"), &bn.running_var));
            }
        }
        for (i, d) in self.fc.iter().enumerate() {
            out.push((format!("trunk.fc{i}.weight"), &d.weight));
            out.push((format!("trunk.fc{i}.bias"), &d.bias));
        }
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("trunk.block{i}");
            for (name, conv) in [
                ("conv1", &mut b.conv1),
                ("conv2", &mut b.conv2),
                ("skip", &mut b.skip),
            ] {
                out.push((format!("{p}.{name}.kernel"), &mut conv.kernel));
                out.push((format!("{p}.{name}.bias"), &mut conv.bias));
            }
            for (name, bn) in [("bn1", &mut b.bn1), ("bn2", &mut b.bn2)] {
                out.push((format!("{p}.{name}.gamma"), &mut bn.gamma));
                out.push((format!("{p}.{name}.beta"), &mut bn.beta));
                out.push((format!("{p}.{name}.running_mean"), &mut bn.running_mean));
                out.push((format!("{p}.{name}.running_var"), &mut bn.running_var));
            }
        }
        for (i, d) in self.fc.iter_mut().enumerate() {
            out.push((format!("trunk.fc{i}.weight"), &mut d.weight));
            out.push((format!("trunk.fc{i}.bias"), &mut d.bias));
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormParams> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.bn1, &mut b.bn2])
            .collect()
    }

    /// Number of trainable weights (conv, dense and batchnorm affine).
    pub fn num_weights(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Folds per-layer batch statistics (in batchnorm order) into the
    /// running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.batch_norms_mut().into_iter().zip(stats) {
            bn.update_running(s, BN_MOMENTUM);
        }
    }
}

impl HeadParams {
    pub fn init(arch: &ArchConfig, env_id: EnvId, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::rng_for(seed, &[tag::HEAD_INIT, env_id.0 as u64]);
        let hidden = (0..arch.head_fc_layers)
            .map(|_| DenseParams::init(arch.fc_width, arch.fc_width, &mut rng))
            .collect();
        let output = DenseParams::init(arch.fc_width, arch.output_dim, &mut rng);
        Ok(Self { hidden, output })
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for d in self.hidden.iter().chain([&self.output]) {
            out.extend([&d.weight, &d.bias]);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in self.hidden.iter_mut().chain([&mut self.output]) {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        out
    }

    pub fn named_tensors(&self, env_id: EnvId) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, d) in self.hidden.iter().enumerate() {
            out.push((format!("head.{env_id}.hidden{i}.weight"), &d.weight));
            out.push((format!("head.{env_id}.hidden{i}.bias"), &d.bias));
        }
        out.push((format!("head.{env_id}.output.weight"), &self.output.weight));
        out.push((format!("head.{env_id}.output.bias"), &self.output.bias));
        out
    }

    pub(crate) fn named_tensors_mut(&mut self, env_id: EnvId) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, d) in self.hidden.iter_mut().enumerate() {
            out.push((format!("head.{env_id}.hidden{i}.weight"), &mut d.weight));
            out.push((format!("head.{env_id}.hidden{i}.bias"), &mut d.bias));
        }
        out.push((format!("head.{env_id}.output.weight"), &mut self.output.weight));
        out.push((format!("head.{env_id}.output.bias"), &mut self.output.bias));
        out
    }

    pub fn num_weights(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }
}

impl ModelParams {
    /// Seeded model with one freshly initialized head per environment.
    pub fn init(arch: &ArchConfig, env_ids: &[EnvId], seed: u64) -> Result<Self> {
        let trunk = TrunkParams::init(arch, seed)?;
        Self::with_trunk(arch, trunk, env_ids, seed)
    }

    /// Wraps an existing trunk with fresh heads.
    pub fn with_trunk(arch: &ArchConfig, trunk: TrunkParams, env_ids: &[EnvId], seed: u64) -> Result<Self> {
        if env_ids.is_empty() {
            return Err(Error::config("a model needs at least one head"));
        }
        let heads = env_ids
            .iter()
            .map(|&id| Ok((id, HeadParams::init(arch, id, seed)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            arch: arch.clone(),
            trunk,
            heads,
        })
    }

    pub fn head(&self, env_id: EnvId) -> Result<&HeadParams> {
        self.heads
            .get(&env_id)
            .ok_or_else(|| Error::config(format!("model has no head for environment {env_id}")))
    }

    pub fn num_weights(&self) -> usize {
        self.trunk.num_weights() + self.heads.values().map(HeadParams::num_weights).sum::<usize>()
    }

    /// Eval-mode prediction for environment `env_id`.
    pub fn predict(&self, env_id: EnvId, x: &Tensor) -> Result<Tensor> {
        let (z, _) = forward_trunk(&self.trunk, x, BnMode::Eval)?;
        forward_head(self.head(env_id)?, &z)
    }
}

/// `init_model`: `num_heads` heads keyed `0..num_heads`.
pub fn init_model(arch: &ArchConfig, num_heads: usize, seed: u64) -> Result<ModelParams> {
    let ids: Vec<EnvId> = (0..num_heads as u32).map(EnvId).collect();
    ModelParams::init(arch, &ids, seed)
}

/// Trunk nodes of a graph: the feature vector and the batchnorm nodes in
/// layer order.
pub struct TrunkNodes {
    pub z: Var,
    pub batch_norms: Vec<Var>,
}

impl TrunkNodes {
    pub fn batch_stats(&self, g: &Graph<'_>) -> Vec<BatchStats> {
        self.batch_norms.iter().filter_map(|v| g.batch_stats(*v)).collect()
    }
}

/// Records the trunk on `g`. With `first_id = Some(k)` the trainable tensors
/// bind as parameters `k, k+1, ...` in [`TrunkParams::trainable`] order;
/// with `None` they are constants.
pub fn build_trunk<'a>(
    g: &mut Graph<'a>,
    trunk: &'a TrunkParams,
    x: Var,
    mode: BnMode,
    first_id: Option<ParamId>,
) -> Result<TrunkNodes> {
    let mut next = first_id;
    let mut bind = |g: &mut Graph<'a>, t: &'a Tensor| {
        let id = next;
        if let Some(n) = next.as_mut() {
            *n += 1;
        }
        g.bind(t, id)
    };
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 4 || xs[3] != FINGERPRINT_CHANNELS {
        return Err(Error::shape(format!(
            "trunk expects [B, N_A, N_C, 3] input, got {xs:?}"
        )));
    }
    let mut h = x;
    let mut batch_norms = Vec::new();
    let stride = (trunk.block_stride[0], trunk.block_stride[1]);
    for b in &trunk.blocks {
        let k1 = bind(g, &b.conv1.kernel);
        let c1 = bind(g, &b.conv1.bias);
        let g1 = bind(g, &b.bn1.gamma);
        let b1 = bind(g, &b.bn1.beta);
        let k2 = bind(g, &b.conv2.kernel);
        let c2 = bind(g, &b.conv2.bias);
        let g2 = bind(g, &b.bn2.gamma);
        let b2 = bind(g, &b.bn2.beta);
        let ks = bind(g, &b.skip.kernel);
        let cs = bind(g, &b.skip.bias);

        let y = g.conv2d(h, k1, c1, (1, 1))?;
        let y = g.batch_norm(y, g1, b1, mode, Some((&b.bn1.running_mean, &b.bn1.running_var)))?;
        batch_norms.push(y);
        let y = g.relu(y);
        let y = g.conv2d(y, k2, c2, stride)?;
        let y = g.batch_norm(y, g2, b2, mode, Some((&b.bn2.running_mean, &b.bn2.running_var)))?;
        batch_norms.push(y);
        let y = g.relu(y);
        let s = g.conv2d(h, ks, cs, stride)?;
        h = g.add(y, s)?;
    }
    let mut h = g.flatten(h)?;
    for d in &trunk.fc {
        let w = bind(g, &d.weight);
        let b = bind(g, &d.bias);
        h = g.dense(h, w, b)?;
        h = g.relu(h);
    }
    Ok(TrunkNodes { z: h, batch_norms })
}

/// Records a head on `g`, returning the `[B, 2]` prediction node.
pub fn build_head<'a>(
    g: &mut Graph<'a>,
    head: &'a HeadParams,
    z: Var,
    first_id: Option<ParamId>,
) -> Result<Var> {
    let mut next = first_id;
    let mut bind = |g: &mut Graph<'a>, t: &'a Tensor| {
        let id = next;
        if let Some(n) = next.as_mut() {
            *n += 1;
        }
        g.bind(t, id)
    };
    let mut h = z;
    for d in &head.hidden {
        let w = bind(g, &d.weight);
        let b = bind(g, &d.bias);
        h = g.dense(h, w, b)?;
        h = g.relu(h);
    }
    let w = bind(g, &head.output.weight);
    let b = bind(g, &head.output.bias);
    g.dense(h, w, b)
}

/// Trunk features for a `[B, N_A, N_C, 3]` batch, plus the batch statistics
/// when `mode` is train.
pub fn forward_trunk(trunk: &TrunkParams, x: &Tensor, mode: BnMode) -> Result<(Tensor, Vec<BatchStats>)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let nodes = build_trunk(&mut g, trunk, xv, mode, None)?;
    Ok((g.value(nodes.z).clone(), nodes.batch_stats(&g)))
}

/// Head prediction `[B, 2]` for features `z` (`[B, fc_width]`).
pub fn forward_head(head: &HeadParams, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let out = build_head(&mut g, head, zv, None)?;
    Ok(g.value(out).clone())
}
