//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MLOCCKPT"
//! version      u32
//! header_len   u64
//! header       JSON (arch, head ids, trunk_only, optimizer metadata)
//! n_tensors    u32
//! n_tensors x  { name_len u32, name utf-8, ndim u32, dims u64 x ndim, data f64 x prod(dims) }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, HeadParams, ModelParams, TrunkParams, FINGERPRINT_CHANNELS};
use crate::autodiff::{OptimizerConfig, OptimizerKind, OptimizerState, Tensor};
use crate::channel_sim::EnvId;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MLOCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 256;
const MAX_NDIM: usize = 8;

/// Everything a checkpoint can hold. `heads` is empty for a trunk-only
/// checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub trunk: TrunkParams,
    pub heads: BTreeMap<EnvId, HeadParams>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    heads: Vec<EnvId>,
    trunk_only: bool,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    config: OptimizerConfig,
    step: u64,
    slots: usize,
}

impl Checkpoint {
    pub fn from_model(model: &ModelParams) -> Self {
        Self {
            arch: model.arch.clone(),
            trunk: model.trunk.clone(),
            heads: model.heads.clone(),
            optimizer: None,
        }
    }

    pub fn trunk_only(arch: &ArchConfig, trunk: &TrunkParams) -> Self {
        Self {
            arch: arch.clone(),
            trunk: trunk.clone(),
            heads: BTreeMap::new(),
            optimizer: None,
        }
    }

    pub fn is_trunk_only(&self) -> bool {
        self.heads.is_empty()
    }

    /// The full model. Fails for a trunk-only checkpoint.
    pub fn into_model(self) -> Result<ModelParams> {
        if self.is_trunk_only() {
            return Err(Error::Checkpoint("checkpoint holds a trunk only".into()));
        }
        Ok(ModelParams {
            arch: self.arch,
            trunk: self.trunk,
            heads: self.heads,
        })
    }

    /// Loads the trunk into a model with freshly seeded heads for `env_ids`.
    /// Heads stored in the checkpoint are ignored.
    pub fn into_model_with_fresh_heads(self, env_ids: &[EnvId], seed: u64) -> Result<ModelParams> {
        ModelParams::with_trunk(&self.arch, self.trunk, env_ids, seed)
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.named_tensors();
        for (id, head) in &self.heads {
            out.extend(head.named_tensors(*id));
        }
        if let Some(opt) = &self.optimizer {
            for (i, t) in opt.m.iter().enumerate() {
                out.push((format!("optim.m{i}"), t));
            }
            for (i, t) in opt.v.iter().enumerate() {
                out.push((format!("optim.v{i}"), t));
            }
        }
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            arch: self.arch.clone(),
            heads: self.heads.keys().copied().collect(),
            trunk_only: self.is_trunk_only(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config.clone(),
                step: o.step,
                slots: o.m.len(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = r.len_u64()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        header.arch.validate()?;
        if header.trunk_only != header.heads.is_empty() {
            return Err(Error::Checkpoint("trunk_only flag disagrees with head list".into()));
        }
        let distinct: BTreeSet<_> = header.heads.iter().collect();
        if distinct.len() != header.heads.len() {
            return Err(Error::Checkpoint("duplicate head ids".into()));
        }

        let n = r.u32()? as usize;
        let mut stored = BTreeMap::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            if stored.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }

        // Every stored value has been read, so the remaining work is bounded
        // by the input size. Refuse an architecture whose parameters would not
        // have fit in it before allocating anything.
        let stored_len: usize = stored.values().map(Tensor::len).sum();
        match storage_len(&header.arch, header.heads.len()) {
            Some(need) if need <= stored_len => {}
            _ => {
                return Err(Error::Checkpoint(
                    "architecture does not match the stored tensors".into(),
                ))
            }
        }

        let mut ckpt = Checkpoint {
            trunk: TrunkParams::init(&header.arch, 0)?,
            heads: header
                .heads
                .iter()
                .map(|&id| Ok((id, HeadParams::init(&header.arch, id, 0)?)))
                .collect::<Result<_>>()?,
            arch: header.arch,
            optimizer: None,
        };
        {
            let mut slots = ckpt.trunk.named_tensors_mut();
            for (id, head) in ckpt.heads.iter_mut() {
                slots.extend(head.named_tensors_mut(*id));
            }
            for (name, slot) in slots {
                let t = stored
                    .remove(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, architecture expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }

        if let Some(meta) = header.optimizer {
            let expected = ckpt.trunk.trainable().len()
                + ckpt.heads.values().map(|h| h.trainable().len()).sum::<usize>();
            let slots = match meta.config.kind {
                OptimizerKind::Adam => expected,
                OptimizerKind::Sgd => 0,
            };
            if meta.slots != slots {
                return Err(Error::Checkpoint(format!(
                    "optimizer tracks {} slots, model has {slots}",
                    meta.slots
                )));
            }
            let shapes: Vec<Vec<usize>> = ckpt
                .trunk
                .trainable()
                .into_iter()
                .chain(ckpt.heads.values().flat_map(|h| h.trainable()))
                .map(|t| t.shape().to_vec())
                .collect();
            let mut take = |prefix: &str| -> Result<Vec<Tensor>> {
                (0..slots)
                    .map(|i| {
                        let name = format!("optim.{prefix}{i}");
                        let t = stored
                            .remove(&name)
                            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                        if t.shape() != shapes[i].as_slice() {
                            return Err(Error::Checkpoint(format!("tensor {name} has the wrong shape")));
                        }
                        Ok(t)
                    })
                    .collect()
            };
            let m = take("m")?;
            let v = take("v")?;
            ckpt.optimizer = Some(OptimizerState {
                config: meta.config,
                step: meta.step,
                m,
                v,
            });
        }
        if let Some(name) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(ckpt)
    }

    /// Rejects a checkpoint whose architecture differs from `arch`.
    pub fn expect_arch(&self, arch: &ArchConfig) -> Result<()> {
        if &self.arch != arch {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {:?} does not match the requested {:?}",
                self.arch, arch
            )));
        }
        Ok(())
    }
}

/// Number of f64 values a model with `num_heads` heads stores, or `None` on
/// overflow.
fn storage_len(arch: &ArchConfig, num_heads: usize) -> Option<usize> {
    let [kh, kw] = arch.kernel;
    let f = arch.filters;
    let area = kh.checked_mul(kw)?;
    let mut total = 0usize;
    let mut cin = FINGERPRINT_CHANNELS;
    let (mut h, mut w) = (arch.input_antennas, arch.input_subcarriers);
    for _ in 0..arch.num_residual_blocks {
        let conv1 = area.checked_mul(cin)?.checked_mul(f)?.checked_add(f)?;
        let conv2 = area.checked_mul(f)?.checked_mul(f)?.checked_add(f)?;
        let skip = cin.checked_mul(f)?.checked_add(f)?;
        let bns = f.checked_mul(8)?;
        total = total
            .checked_add(conv1)?
            .checked_add(conv2)?
            .checked_add(skip)?
            .checked_add(bns)?;
        cin = f;
        h = h.div_ceil(arch.block_stride[0]);
        w = w.div_ceil(arch.block_stride[1]);
    }
    let width = arch.fc_width;
    let square = width.checked_mul(width)?.checked_add(width)?;
    let mut n_in = h.checked_mul(w)?.checked_mul(f)?;
    for _ in 0..arch.trunk_fc_layers {
        total = total.checked_add(n_in.checked_mul(width)?.checked_add(width)?)?;
        n_in = width;
    }
    let head = square
        .checked_mul(arch.head_fc_layers)?
        .checked_add(width.checked_mul(arch.output_dim)?.checked_add(arch.output_dim)?)?;
    total.checked_add(head.checked_mul(num_heads)?)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Checkpoint(format!("tensor name of {name_len} bytes")));
        }
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let ndim = self.u32()? as usize;
        if ndim > MAX_NDIM {
            return Err(Error::Checkpoint(format!("tensor {name} has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let d = self.len_u64()?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            shape.push(d);
        }
        let byte_len = count
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = self.take(byte_len)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.encode()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
