//! Checkpoint directory:
//!
//! * `meta.json`: config echo, shapes, affinity parameters, last metrics.
//! * `params.bin`: `ACLCKPT1`, `u32` tensor count, then per tensor a
//!   `u32`-length-prefixed UTF-8 name, `u32` rank, `u32` extents and
//!   little-endian `f64` values.
//! * `prototypes.bin`: `ACLCKPT1`, `u32` classes, `u32` dim, `f64` momentum,
//!   then per class a `u8` initialized flag and `dim` `f64` values.
//! * `affinity.json`: the confusion counts the affinity model is built from.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::affinity::{AffinityModel, ConfusionStats};
use crate::backbone::EncoderParams;
use crate::data::{read_json, read_payload, write_json, SkeletonDataset};
use crate::error::{AclError, Result};
use crate::numerics::{DenseTensor, ParamSet};
use crate::prototypes::PrototypeBank;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ACLCKPT1";
const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epochs_completed: usize,
    pub class_count: usize,
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub affinity_k: usize,
    pub affinity_n_a: usize,
    pub metrics_tail: Vec<EpochMetrics>,
    pub params: EncoderParams,
    pub prototypes: PrototypeBank,
    pub confusion: ConfusionStats,
}

impl Checkpoint {
    /// The affinity model in force at the end of training.
    pub fn affinity_model(&self) -> Result<AffinityModel> {
        AffinityModel::build(&self.confusion, self.affinity_k, self.affinity_n_a)
    }

    pub fn check_compatible(&self, ds: &SkeletonDataset) -> Result<()> {
        let m = &ds.meta;
        if m.class_count != self.class_count {
            return Err(AclError::invalid(format!(
                "checkpoint has {} classes, dataset has {}",
                self.class_count, m.class_count
            )));
        }
        if (m.channels, m.joints) != (self.channels, self.joints) {
            return Err(AclError::shape(format!(
                "checkpoint expects {} channels over {} joints, dataset has {} over {}",
                self.channels, self.joints, m.channels, m.joints
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    magic: String,
    format_version: u32,
    config: TrainConfig,
    epochs_completed: usize,
    class_count: usize,
    channels: usize,
    frames: usize,
    joints: usize,
    metrics_tail: Vec<EpochMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffinityState {
    k: usize,
    n_a: usize,
    class_count: usize,
    total_samples: u64,
    counts: Vec<Vec<u64>>,
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| AclError::invalid("value exceeds u32"))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        magic: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: ckpt.config.clone(),
        epochs_completed: ckpt.epochs_completed,
        class_count: ckpt.class_count,
        channels: ckpt.channels,
        frames: ckpt.frames,
        joints: ckpt.joints,
        metrics_tail: ckpt.metrics_tail.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;

    let mut buf = CHECKPOINT_MAGIC.to_vec();
    let set = ckpt.params.to_param_set();
    push_u32(&mut buf, set.len())?;
    for (name, t) in &set {
        push_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, t.shape().len())?;
        for &e in t.shape() {
            push_u32(&mut buf, e)?;
        }
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("params.bin"), buf)?;

    let bank = &ckpt.prototypes;
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    push_u32(&mut buf, bank.class_count())?;
    push_u32(&mut buf, bank.dim())?;
    buf.extend_from_slice(&bank.momentum().to_le_bytes());
    for (p, &init) in bank.prototypes().iter().zip(bank.initialized()) {
        buf.push(u8::from(init));
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("prototypes.bin"), buf)?;

    let c = ckpt.confusion.class_count();
    let state = AffinityState {
        k: ckpt.affinity_k,
        n_a: ckpt.affinity_n_a,
        class_count: c,
        total_samples: ckpt.confusion.total_samples(),
        counts: (0..c).map(|i| ckpt.confusion.row(i).to_vec()).collect(),
    };
    write_json(&dir.join("affinity.json"), &state)?;
    Ok(())
}

/// Bounds-checked little-endian reader over a payload.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AclError::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn malformed(&self, reason: impl Into<String>) -> AclError {
        AclError::Malformed {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join("meta.json");
    let meta: CheckpointMeta = read_json(&meta_path)?;
    if meta.magic.as_bytes() != CHECKPOINT_MAGIC {
        return Err(AclError::BadMagic {
            path: meta_path,
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: meta.magic,
        });
    }
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(AclError::VersionMismatch {
            path: meta_path,
            expected: CHECKPOINT_FORMAT_VERSION,
            found: meta.format_version,
        });
    }

    let path = dir.join("params.bin");
    let payload = read_payload(&path, CHECKPOINT_MAGIC)?;
    let mut r = Reader {
        path: &path,
        bytes: &payload,
        pos: 0,
    };
    let mut set = ParamSet::new();
    for _ in 0..r.u32()? {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.malformed("tensor name is not UTF-8"))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let count = count.ok_or_else(|| r.malformed("tensor size overflows"))?;
        let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let tensor = DenseTensor::new(shape, values).map_err(|e| r.malformed(format!("{name}: {e}")))?;
        if set.insert(name.clone(), tensor).is_some() {
            return Err(r.malformed(format!("duplicate tensor {name}")));
        }
    }
    r.finish()?;
    let params = EncoderParams::from_param_set(&set)?;

    let path = dir.join("prototypes.bin");
    let payload = read_payload(&path, CHECKPOINT_MAGIC)?;
    let mut r = Reader {
        path: &path,
        bytes: &payload,
        pos: 0,
    };
    let classes = r.u32()?;
    let dim = r.u32()?;
    let momentum = r.f64()?;
    let mut protos = Vec::with_capacity(classes);
    let mut flags = Vec::with_capacity(classes);
    for _ in 0..classes {
        flags.push(match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.malformed(format!("bad initialized flag {other}"))),
        });
        protos.push((0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
    }
    r.finish()?;
    let prototypes = PrototypeBank::from_parts(momentum, protos, flags)?;

    let aff_path = dir.join("affinity.json");
    let state: AffinityState = read_json(&aff_path)?;
    let confusion = ConfusionStats::from_matrix(state.class_count, state.counts.concat())?;
    if confusion.total_samples() != state.total_samples {
        return Err(AclError::Malformed {
            path: aff_path,
            reason: "total_samples disagrees with counts".into(),
        });
    }

    let ckpt = Checkpoint {
        config: meta.config,
        epochs_completed: meta.epochs_completed,
        class_count: meta.class_count,
        channels: meta.channels,
        frames: meta.frames,
        joints: meta.joints,
        affinity_k: state.k,
        affinity_n_a: state.n_a,
        metrics_tail: meta.metrics_tail,
        params,
        prototypes,
        confusion,
    };
    if ckpt.params.class_count() != ckpt.class_count
        || ckpt.prototypes.class_count() != ckpt.class_count
        || ckpt.confusion.class_count() != ckpt.class_count
        || ckpt.params.input_channels() != ckpt.channels
        || ckpt.prototypes.dim() != ckpt.params.embedding_dim()
    {
        return Err(AclError::Malformed {
            path: dir.to_path_buf(),
            reason: "checkpoint components disagree in shape".into(),
        });
    }
    ckpt.affinity_model()?;
    Ok(ckpt)
}
