//! Fingerprint construction and labelled datasets.
//!
//! A fingerprint is the `N_A x N_C x 3` real tensor of magnitudes and the
//! sine/cosine of each antenna row's phase relative to row 0. Datasets keep
//! the raw (unnormalized) fingerprints as `f32`, the exact values written to
//! disk, and apply the fitted min-max map when batches are assembled.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::channel_sim::{self, EnvId, Environment, RadioConfig};
use crate::error::{Error, Result};
use crate::model::FINGERPRINT_CHANNELS;
use crate::rng::{self, tag};

/// Row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl CMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }
}

/// Stacks the per-transmit-antenna `N_C x N_R` matrices into the
/// `N_A x N_C` channel: row `k * N_T + m` holds receive antenna `k` of
/// transmit antenna `m`.
pub fn stack_fingerprint(per_tx: &[CMatrix]) -> Result<CMatrix> {
    let first = per_tx
        .first()
        .ok_or_else(|| Error::shape("no transmit-antenna matrices to stack"))?;
    let (n_sub, n_rx) = (first.rows, first.cols);
    if per_tx.iter().any(|m| m.rows != n_sub || m.cols != n_rx) {
        return Err(Error::shape("ragged per-antenna channel matrices"));
    }
    let n_tx = per_tx.len();
    let mut data = vec![Complex64::new(0.0, 0.0); n_rx * n_tx * n_sub];
    for (m, h) in per_tx.iter().enumerate() {
        for c in 0..n_sub {
            for k in 0..n_rx {
                data[(k * n_tx + m) * n_sub + c] = h.get(c, k);
            }
        }
    }
    CMatrix::new(n_rx * n_tx, n_sub, data)
}

/// Three-channel features in `[row][subcarrier][channel]` order: magnitude,
/// then sine and cosine of the phase relative to row 0. Cells where either
/// entry has zero magnitude get sine 0 and cosine 1.
pub fn phase_diff_features(h: &CMatrix) -> Vec<f64> {
    let mut out = vec![0.0; h.rows * h.cols * FINGERPRINT_CHANNELS];
    for r in 0..h.rows {
        for c in 0..h.cols {
            let v = h.get(r, c);
            let z = v * h.get(0, c).conj();
            let n = z.norm();
            let (s, co) = if n > 0.0 && n.is_finite() {
                (z.im / n, z.re / n)
            } else {
                (0.0, 1.0)
            };
            let base = (r * h.cols + c) * FINGERPRINT_CHANNELS;
            out[base] = v.norm();
            out[base + 1] = s;
            out[base + 2] = co;
        }
    }
    out
}

/// Per-channel min/max fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub min: [f64; FINGERPRINT_CHANNELS],
    pub max: [f64; FINGERPRINT_CHANNELS],
}

impl NormStats {
    /// Maps `v` of channel `ch` into `[0, 1]`, clamping outside the fitted
    /// range; a constant channel maps to 0.
    pub fn apply(&self, ch: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[ch], self.max[ch]);
        if hi <= lo {
            return 0.0;
        }
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

/// Fits per-channel statistics over `samples`, each a flat fingerprint in
/// `[row][subcarrier][channel]` order. Reduction runs in sample order.
pub fn fit_normalizer<'a, I>(samples: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut min = [f64::INFINITY; FINGERPRINT_CHANNELS];
    let mut max = [f64::NEG_INFINITY; FINGERPRINT_CHANNELS];
    let mut seen = false;
    for s in samples {
        seen = true;
        for cell in s.chunks_exact(FINGERPRINT_CHANNELS) {
            for ch in 0..FINGERPRINT_CHANNELS {
                let v = cell[ch] as f64;
                min[ch] = min[ch].min(v);
                max[ch] = max[ch].max(v);
            }
        }
    }
    if !seen {
        return Err(Error::Dataset("cannot fit a normalizer on an empty training set".into()));
    }
    Ok(NormStats { min, max })
}

/// Normalizes one fingerprint.
pub fn normalize(h: &[f32], stats: &NormStats) -> Vec<f64> {
    h.chunks_exact(FINGERPRINT_CHANNELS)
        .flat_map(|cell| (0..FINGERPRINT_CHANNELS).map(move |ch| stats.apply(ch, cell[ch] as f64)))
        .collect()
}

/// One labelled fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub tensor: Vec<f32>,
    pub label: [f32; 2],
    pub env_id: EnvId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    /// 80 % train, 20 % test.
    Source,
    /// 70 % training pool, 30 % test.
    Target,
}

impl SplitRole {
    pub fn train_fraction(self) -> f64 {
        match self {
            SplitRole::Source => 0.8,
            SplitRole::Target => 0.7,
        }
    }
}

/// Region in which UE positions are drawn; `None` on a field means the full
/// extent of the environment along that axis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub x_range: Option<[f64; 2]>,
    pub y_range: Option<[f64; 2]>,
}

impl Sampling {
    fn ranges(&self, env: &Environment) -> Result<([f64; 2], [f64; 2])> {
        let g = &env.geometry;
        let x = self.x_range.unwrap_or([0.0, g.length_m]);
        let y = self.y_range.unwrap_or([0.0, g.width_m]);
        for [lo, hi] in [x, y] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config("sampling range must be an ordered finite interval"));
            }
        }
        if !g.contains([x[0], y[0]]) || !g.contains([x[1], y[1]]) {
            return Err(Error::config("sampling region extends beyond the environment area"));
        }
        Ok((x, y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env_id: EnvId,
    pub radio: RadioConfig,
    pub environment: Environment,
    pub role: SplitRole,
    pub n_rows: usize,
    pub n_sub: usize,
    /// Raw fingerprints, `count * n_rows * n_sub * 3`.
    pub features: Vec<f32>,
    /// Positions in meters, `count * 2`.
    pub labels: Vec<f32>,
    /// Training indices in shuffled order; prefixes form nested subsets.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub normalization: NormStats,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.n_rows * self.n_sub * FINGERPRINT_CHANNELS
    }

    pub fn raw(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.features[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> [f64; 2] {
        [self.labels[2 * i] as f64, self.labels[2 * i + 1] as f64]
    }

    pub fn fingerprint(&self, i: usize) -> Fingerprint {
        Fingerprint {
            tensor: self.raw(i).to_vec(),
            label: [self.labels[2 * i], self.labels[2 * i + 1]],
            env_id: self.env_id,
        }
    }

    pub fn normalized(&self, i: usize) -> Vec<f64> {
        normalize(self.raw(i), &self.normalization)
    }

    /// Normalized inputs `[B, N_A, N_C, 3]` and labels `[B, 2]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let n = self.sample_len();
        let mut x = Vec::with_capacity(indices.len() * n);
        let mut y = Vec::with_capacity(indices.len() * 2);
        for &i in indices {
            x.extend(self.raw(i).chunks_exact(FINGERPRINT_CHANNELS).flat_map(|cell| {
                (0..FINGERPRINT_CHANNELS).map(move |ch| self.normalization.apply(ch, cell[ch] as f64))
            }));
            y.extend(self.label(i));
        }
        let b = indices.len();
        (
            Tensor::new(vec![b, self.n_rows, self.n_sub, FINGERPRINT_CHANNELS], x).expect("sized"),
            Tensor::new(vec![b, 2], y).expect("sized"),
        )
    }

    /// The first `k` samples of the shuffled training pool.
    pub fn train_subset(&self, k: usize) -> Result<&[usize]> {
        self.train_indices.get(..k).ok_or_else(|| {
            Error::config(format!(
                "requested {k} training samples but the pool holds {}",
                self.train_indices.len()
            ))
        })
    }

    /// Copy whose training split is truncated to its first `k` samples.
    /// Normalization statistics stay those of the full training split.
    pub fn with_train_budget(&self, k: usize) -> Result<Dataset> {
        let keep = self.train_subset(k)?.to_vec();
        Ok(Dataset {
            train_indices: keep,
            ..self.clone()
        })
    }
}

/// Generates `count` labelled fingerprints at seeded uniform positions,
/// splits them for `role`, and fits normalization on the training split.
pub fn build_dataset(
    env: &Environment,
    sampling: &Sampling,
    radio: &RadioConfig,
    count: usize,
    role: SplitRole,
    rng_seed: u64,
) -> Result<Dataset> {
    radio.validate()?;
    if count == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    let ([x0, x1], [y0, y1]) = sampling.ranges(env)?;
    let mut pos_rng = rng::rng_for(rng_seed, &[tag::POSITIONS, env.env_id.0 as u64]);
    let (n_rows, n_sub) = (radio.num_antenna_pairs(), radio.num_pilot_subcarriers);
    let sample_len = n_rows * n_sub * FINGERPRINT_CHANNELS;
    let mut features = Vec::with_capacity(count * sample_len);
    let mut labels = Vec::with_capacity(count * 2);
    for i in 0..count {
        let p = [pos_rng.gen_range(x0..=x1), pos_rng.gen_range(y0..=y1)];
        let csi = channel_sim::synth_channel(env, p, radio)?;
        let noise_seed = rng::derive_seed(rng_seed, &[tag::NOISE, env.env_id.0 as u64, i as u64]);
        let csi = channel_sim::apply_noise(&csi, radio, noise_seed);
        let per_tx = csi
            .per_tx_matrices()
            .into_iter()
            .map(|d| CMatrix::new(n_sub, radio.n_rx, d))
            .collect::<Result<Vec<_>>>()?;
        let stacked = stack_fingerprint(&per_tx)?;
        features.extend(phase_diff_features(&stacked).into_iter().map(|v| v as f32));
        labels.extend([p[0] as f32, p[1] as f32]);
    }
    let unsplit = Dataset {
        env_id: env.env_id,
        radio: radio.clone(),
        environment: env.clone(),
        role,
        n_rows,
        n_sub,
        features,
        labels,
        train_indices: Vec::new(),
        test_indices: Vec::new(),
        normalization: NormStats {
            min: [0.0; 3],
            max: [1.0; 3],
        },
    };
    split_dataset(&unsplit, role, rng_seed)
}

/// Re-splits by seeded shuffle (source 80/20, target 70/30) and refits the
/// normalization on the new training split.
pub fn split_dataset(ds: &Dataset, role: SplitRole, rng_seed: u64) -> Result<Dataset> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_for(rng_seed, &[tag::SPLIT, ds.env_id.0 as u64]));
    let n_train = ((n as f64 * role.train_fraction()).round() as usize).clamp(1, n);
    let test_indices = order.split_off(n_train);
    let normalization = fit_normalizer(order.iter().map(|&i| ds.raw(i)))?;
    Ok(Dataset {
        role,
        train_indices: order,
        test_indices,
        normalization,
        ..ds.clone()
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINGERPRINTS_FILE: &str = "fingerprints.f32";
pub const LABELS_FILE: &str = "labels.f32";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// `manifest.json` of an on-disk dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub env_id: EnvId,
    pub count: usize,
    /// `[N_A, N_C, 3]`; fingerprints are stored row-major in this order.
    pub shape: [usize; 3],
    pub radio: RadioConfig,
    pub environment: Environment,
    pub normalization: NormStats,
    pub role: SplitRole,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub fingerprints_file: String,
    pub labels_file: String,
}

fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn le_to_f32s(bytes: &[u8], expected: usize, what: &str) -> Result<Vec<f32>> {
    if Some(bytes.len()) != expected.checked_mul(4) {
        return Err(Error::Dataset(format!(
            "{what}: expected {expected} f32 values, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            env_id: self.env_id,
            count: self.len(),
            shape: [self.n_rows, self.n_sub, FINGERPRINT_CHANNELS],
            radio: self.radio.clone(),
            environment: self.environment.clone(),
            normalization: self.normalization.clone(),
            role: self.role,
            train_indices: self.train_indices.clone(),
            test_indices: self.test_indices.clone(),
            fingerprints_file: FINGERPRINTS_FILE.into(),
            labels_file: LABELS_FILE.into(),
        }
    }

    /// Serialized `(manifest, fingerprints, labels)` payloads.
    pub fn to_parts(&self) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        Ok((manifest, f32s_to_le(&self.features), f32s_to_le(&self.labels)))
    }

    /// Decodes and validates the three payloads of an on-disk dataset.
    pub fn from_parts(manifest: &[u8], fingerprints: &[u8], labels: &[u8]) -> Result<Dataset> {
        let m: DatasetManifest = serde_json::from_slice(manifest)?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset format version {}",
                m.format_version
            )));
        }
        m.radio.validate()?;
        if m.shape != [m.radio.num_antenna_pairs(), m.radio.num_pilot_subcarriers, FINGERPRINT_CHANNELS] {
            return Err(Error::Dataset(format!(
                "shape {:?} disagrees with the radio configuration",
                m.shape
            )));
        }
        if m.environment.env_id != m.env_id {
            return Err(Error::Dataset("manifest env_id disagrees with its environment".into()));
        }
        let per = m.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let total = per
            .and_then(|p| p.checked_mul(m.count))
            .ok_or_else(|| Error::Dataset("dataset dimensions overflow".into()))?;
        let labels_len = m
            .count
            .checked_mul(2)
            .ok_or_else(|| Error::Dataset("dataset dimensions overflow".into()))?;
        let features = le_to_f32s(fingerprints, total, "fingerprints")?;
        let labels = le_to_f32s(labels, labels_len, "labels")?;
        let mut seen = vec![false; m.count];
        for &i in m.train_indices.iter().chain(&m.test_indices) {
            if i >= m.count || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Dataset("split indices must be a partition of the samples".into()));
            }
        }
        if m.count > 0 && seen.iter().any(|s| !s) {
            return Err(Error::Dataset("split indices do not cover every sample".into()));
        }
        Ok(Dataset {
            env_id: m.env_id,
            radio: m.radio,
            environment: m.environment,
            role: m.role,
            n_rows: m.shape[0],
            n_sub: m.shape[1],
            features,
            labels,
            train_indices: m.train_indices,
            test_indices: m.test_indices,
            normalization: m.normalization,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, fp, lb) = self.to_parts()?;
        for (name, bytes) in [
            (MANIFEST_FILE, &manifest),
            (FINGERPRINTS_FILE, &fp),
            (LABELS_FILE, &lb),
        ] {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| Error::io(path, e))
        };
        let manifest = read(MANIFEST_FILE)?;
        let m: DatasetManifest = serde_json::from_slice(&manifest)?;
        let safe = |f: &str| !f.contains(['/', '\\']) && f != ".." && !f.is_empty();
        if !safe(&m.fingerprints_file) || !safe(&m.labels_file) {
            return Err(Error::Dataset("data file names must be plain names".into()));
        }
        Dataset::from_parts(&manifest, &read(&m.fingerprints_file)?, &read(&m.labels_file)?)
    }
}
