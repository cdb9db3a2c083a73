//! Synthetic skeleton sequences with planted class families, the on-disk
//! dataset format and stratified splitting.
//!
//! A dataset directory holds three files:
//!
//! * `meta.json`: shape, class counts, adjacency, planted families and the
//!   generation parameters.
//! * `samples.bin`: the magic `ACLDSET1` followed by little-endian `f32`
//!   values laid out `[sample][channel][frame][joint]`.
//! * `labels.bin`: the same magic followed by one little-endian `u32` per sample.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::SkeletonGraph;
use crate::error::{AclError, Result};
use crate::numerics::DenseTensor;

pub const DATASET_MAGIC: &[u8; 8] = b"ACLDSET1";
pub const DATASET_FORMAT_VERSION: u32 = 1;
const SINUSOIDS_PER_TRAJECTORY: usize = 3;
const MAX_FREQUENCY: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub superclasses: usize,
    pub joints: usize,
    pub frames: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    /// Weight ρ of the family-shared template; the class-specific one gets 1 - ρ.
    pub overlap: f64,
    /// Standard deviation of the i.i.d. Gaussian noise.
    pub noise: f64,
    /// Largest per-sample temporal shift, in frames.
    pub phase_jitter: f64,
    /// Half-width of the per-channel posture offset (constant over frames
    /// and joints) of each family-shared template.
    pub family_posture: f64,
    /// Same, for each class-specific template.
    pub class_posture: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 12,
            superclasses: 3,
            joints: 17,
            frames: 20,
            channels: 3,
            samples_per_class: 40,
            overlap: 0.8,
            noise: 0.5,
            phase_jitter: 2.0,
            family_posture: 1.0,
            class_posture: 0.33,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("superclasses", self.superclasses),
            ("joints", self.joints),
            ("frames", self.frames),
            ("channels", self.channels),
            ("samples_per_class", self.samples_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(AclError::invalid(format!("{name} must be positive")));
        }
        if self.superclasses > self.classes {
            return Err(AclError::invalid("superclasses cannot exceed classes"));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(AclError::invalid(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(AclError::invalid("noise must be finite and non-negative"));
        }
        if !(self.phase_jitter >= 0.0 && self.phase_jitter.is_finite()) {
            return Err(AclError::invalid("phase_jitter must be finite and non-negative"));
        }
        for (name, v) in [
            ("family_posture", self.family_posture),
            ("class_posture", self.class_posture),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AclError::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Superclass of each class: classes are dealt round-robin.
    pub fn superclass_of(&self, class: usize) -> usize {
        class % self.superclasses
    }

    pub fn planted_families(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.superclasses];
        for c in 0..self.classes {
            out[self.superclass_of(c)].push(c);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub class_count: usize,
    pub joints: usize,
    pub frames: usize,
    pub channels: usize,
    pub sample_count: usize,
    pub class_counts: Vec<usize>,
    pub adjacency: Vec<Vec<f64>>,
    pub planted_families: Option<Vec<Vec<usize>>>,
    pub generation: Option<GenConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `channels × frames × joints`, row-major.
    pub values: Vec<f32>,
    pub label: usize,
}

impl Sample {
    pub fn to_tensor(&self, channels: usize, frames: usize, joints: usize) -> Result<DenseTensor> {
        DenseTensor::new(
            vec![channels, frames, joints],
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonDataset {
    pub meta: DatasetMeta,
    pub graph: SkeletonGraph,
    pub samples: Vec<Sample>,
}

impl SkeletonDataset {
    pub fn class_count(&self) -> usize {
        self.meta.class_count
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn sample_len(&self) -> usize {
        self.meta.channels * self.meta.frames * self.meta.joints
    }

    pub fn tensors(&self) -> Result<Vec<DenseTensor>> {
        let m = &self.meta;
        self.samples
            .iter()
            .map(|s| s.to_tensor(m.channels, m.frames, m.joints))
            .collect()
    }

    /// Assembles a dataset and checks every invariant.
    pub fn from_parts(meta: DatasetMeta, samples: Vec<Sample>) -> Result<Self> {
        let n = meta.joints;
        if meta.adjacency.len() != n || meta.adjacency.iter().any(|r| r.len() != n) {
            return Err(AclError::invalid(format!("adjacency must be {n}×{n}")));
        }
        let graph = SkeletonGraph::new(n, meta.adjacency.concat())?;
        let ds = Self { meta, graph, samples };
        ds.validate()?;
        Ok(ds)
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        let mut meta = self.meta.clone();
        meta.sample_count = samples.len();
        meta.class_counts = vec![0; meta.class_count];
        for s in &samples {
            meta.class_counts[s.label] += 1;
        }
        Self {
            meta,
            graph: self.graph.clone(),
            samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(AclError::invalid(format!(
                "unknown dataset format version {}",
                m.format_version
            )));
        }
        if m.class_count < 2 || m.joints == 0 || m.frames == 0 || m.channels == 0 {
            return Err(AclError::invalid(
                "dataset dimensions must be positive with at least two classes",
            ));
        }
        if m.sample_count != self.samples.len() {
            return Err(AclError::invalid(format!(
                "meta declares {} samples, found {}",
                m.sample_count,
                self.samples.len()
            )));
        }
        let len = self.sample_len();
        let mut counts = vec![0usize; m.class_count];
        for (k, s) in self.samples.iter().enumerate() {
            if s.label >= m.class_count {
                return Err(AclError::LabelOutOfRange {
                    label: s.label,
                    classes: m.class_count,
                });
            }
            if s.values.len() != len {
                return Err(AclError::shape(format!(
                    "sample {k} has {} values, expected {len}",
                    s.values.len()
                )));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(AclError::NonFinite(format!("sample {k}")));
            }
            counts[s.label] += 1;
        }
        if counts != m.class_counts {
            return Err(AclError::invalid("per-class counts disagree with meta"));
        }
        if let Some(families) = &m.planted_families {
            let mut seen = vec![false; m.class_count];
            for &c in families.iter().flatten() {
                if c >= m.class_count || seen[c] {
                    return Err(AclError::invalid("planted families must partition the classes"));
                }
                seen[c] = true;
            }
            if seen.iter().any(|s| !s) || families.iter().any(Vec::is_empty) {
                return Err(AclError::invalid("planted families must partition the classes"));
            }
        }
        Ok(())
    }
}

/// Smooth trajectory: constant offset plus a few low-frequency sinusoids.
#[derive(Debug, Clone)]
struct Trajectory {
    offset: f64,
    waves: [(f64, f64, f64); SINUSOIDS_PER_TRAJECTORY],
}

impl Trajectory {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let offset = rng.random_range(-1.0..1.0);
        let waves = std::array::from_fn(|_| {
            let freq = f64::from(rng.random_range(1..=MAX_FREQUENCY));
            let amp = rng.random_range(0.25..1.0);
            let phase = rng.random_range(0.0..TAU);
            (freq, amp, phase)
        });
        Self { offset, waves }
    }

    /// Value at `phase` in [0, 1) of the sequence.
    fn at(&self, phase: f64) -> f64 {
        self.waves
            .iter()
            .fold(self.offset, |acc, &(f, a, p)| acc + a * (TAU * f * phase + p).sin())
    }
}

/// One trajectory per (channel, joint), plus a per-channel posture offset
/// shared by every joint.
fn random_template(rng: &mut ChaCha8Rng, cfg: &GenConfig, posture: f64) -> Vec<Trajectory> {
    let mut template: Vec<Trajectory> = (0..cfg.channels * cfg.joints)
        .map(|_| Trajectory::random(rng))
        .collect();
    for ch in 0..cfg.channels {
        let offset = posture * rng.random_range(-1.0..=1.0);
        for traj in &mut template[ch * cfg.joints..(ch + 1) * cfg.joints] {
            traj.offset += offset;
        }
    }
    template
}

pub fn generate_synthetic(cfg: &GenConfig) -> Result<SkeletonDataset> {
    cfg.validate()?;
    let graph = SkeletonGraph::chain_plus_limbs(cfg.joints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared: Vec<Vec<Trajectory>> = (0..cfg.superclasses)
        .map(|_| random_template(&mut rng, cfg, cfg.family_posture))
        .collect();
    let specific: Vec<Vec<Trajectory>> = (0..cfg.classes)
        .map(|_| random_template(&mut rng, cfg, cfg.class_posture))
        .collect();

    let (c_in, t_len, n) = (cfg.channels, cfg.frames, cfg.joints);
    let rho = cfg.overlap;
    let mut samples = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for class in 0..cfg.classes {
        let mut crng = ChaCha8Rng::seed_from_u64(cfg.seed);
        crng.set_stream(class as u64 + 1);
        let family = &shared[cfg.superclass_of(class)];
        let own = &specific[class];
        for _ in 0..cfg.samples_per_class {
            let shift = if cfg.phase_jitter > 0.0 {
                crng.random_range(-cfg.phase_jitter..=cfg.phase_jitter)
            } else {
                0.0
            };
            let mut values = Vec::with_capacity(c_in * t_len * n);
            for ch in 0..c_in {
                for t in 0..t_len {
                    let phase = (t as f64 + shift) / t_len as f64;
                    for j in 0..n {
                        let k = ch * n + j;
                        let clean = rho * family[k].at(phase) + (1.0 - rho) * own[k].at(phase);
                        let noise: f64 = crng.sample(StandardNormal);
                        values.push((clean + cfg.noise * noise) as f32);
                    }
                }
            }
            samples.push(Sample { values, label: class });
        }
    }

    let adjacency = graph.adjacency().chunks_exact(n).map(<[f64]>::to_vec).collect();
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        class_count: cfg.classes,
        joints: n,
        frames: t_len,
        channels: c_in,
        sample_count: samples.len(),
        class_counts: vec![cfg.samples_per_class; cfg.classes],
        adjacency,
        planted_families: Some(cfg.planted_families()),
        generation: Some(cfg.clone()),
    };
    Ok(SkeletonDataset { meta, graph, samples })
}

/// Mean trajectory of each class, flattened.
pub fn class_means(ds: &SkeletonDataset) -> Vec<Vec<f64>> {
    let len = ds.sample_len();
    let mut sums = vec![vec![0.0; len]; ds.class_count()];
    let mut counts = vec![0usize; ds.class_count()];
    for s in &ds.samples {
        counts[s.label] += 1;
        for (a, &v) in sums[s.label].iter_mut().zip(&s.values) {
            *a += f64::from(v);
        }
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        let inv = 1.0 / n.max(1) as f64;
        sum.iter_mut().for_each(|v| *v *= inv);
    }
    sums
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| AclError::io_at(path, e))?;
    serde_json::from_str(&text).map_err(|e| AclError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a binary file and strips its magic.
pub(crate) fn read_payload(path: &Path, magic: &[u8; 8]) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| AclError::io_at(path, e))?;
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        let found = &bytes[..bytes.len().min(magic.len())];
        return Err(AclError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    Ok(bytes[magic.len()..].to_vec())
}

fn expect_len(path: &Path, payload: &[u8], expected: usize) -> Result<()> {
    match payload.len() {
        n if n < expected => Err(AclError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: n,
        }),
        n if n > expected => Err(AclError::Malformed {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after {expected}-byte payload", n - expected),
        }),
        _ => Ok(()),
    }
}

pub fn write_dataset(ds: &SkeletonDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("meta.json"), &ds.meta)?;

    let mut samples = Vec::with_capacity(8 + ds.len() * ds.sample_len() * 4);
    samples.extend_from_slice(DATASET_MAGIC);
    for s in &ds.samples {
        for v in &s.values {
            samples.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("samples.bin"), samples)?;

    let mut labels = Vec::with_capacity(8 + ds.len() * 4);
    labels.extend_from_slice(DATASET_MAGIC);
    for s in &ds.samples {
        let label = u32::try_from(s.label).map_err(|_| AclError::invalid("label exceeds u32"))?;
        labels.extend_from_slice(&label.to_le_bytes());
    }
    fs::write(dir.join("labels.bin"), labels)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SkeletonDataset> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = read_json(&meta_path)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(AclError::VersionMismatch {
            path: meta_path,
            expected: DATASET_FORMAT_VERSION,
            found: meta.format_version,
        });
    }
    let per_sample = meta
        .channels
        .checked_mul(meta.frames)
        .and_then(|v| v.checked_mul(meta.joints))
        .ok_or_else(|| AclError::invalid("sample dimensions overflow"))?;

    let samples_path = dir.join("samples.bin");
    let payload = read_payload(&samples_path, DATASET_MAGIC)?;
    expect_len(&samples_path, &payload, meta.sample_count * per_sample * 4)?;

    let labels_path = dir.join("labels.bin");
    let label_bytes = read_payload(&labels_path, DATASET_MAGIC)?;
    expect_len(&labels_path, &label_bytes, meta.sample_count * 4)?;

    let samples = payload
        .chunks_exact(per_sample * 4)
        .zip(label_bytes.chunks_exact(4))
        .map(|(vals, lab)| Sample {
            values: vals
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                .collect(),
            label: u32::from_le_bytes(lab.try_into().expect("4-byte chunk")) as usize,
        })
        .collect();
    SkeletonDataset::from_parts(meta, samples)
}

/// Stratified split: each class contributes `round(fraction · n_c)` samples
/// to the first part, clamped so both parts keep at least one.
pub fn split_dataset(
    ds: &SkeletonDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(SkeletonDataset, SkeletonDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(AclError::invalid(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count()];
    for (k, s) in ds.samples.iter().enumerate() {
        by_class[s.label].push(k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; ds.len()];
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < 2 {
            return Err(AclError::invalid(format!(
                "class {class} has {} samples, need at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let take = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &k in &idx[..take] {
            in_train[k] = true;
        }
    }
    let (train, eval): (Vec<_>, Vec<_>) = ds.samples.iter().zip(&in_train).partition(|(_, &t)| t);
    let collect = |part: Vec<(&Sample, &bool)>| part.into_iter().map(|(s, _)| s.clone()).collect();
    Ok((ds.with_samples(collect(train)), ds.with_samples(collect(eval))))
}
