//! Deterministic training loop, evaluation and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use optim::{cosine_lr, sgd_nesterov_step, Sgd};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{family_recovery_f1, AffinityModel, ConfusionStats};
use crate::backbone::{encode, EncoderParams, SkeletonGraph};
use crate::data::{split_dataset, SkeletonDataset};
use crate::error::{AclError, Result};
use crate::losses::{argmax, batch_loss, ContrastConfig, LossBreakdown};
use crate::numerics::DenseTensor;
use crate::prototypes::PrototypeBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionReset {
    /// Counts accumulate from the affinity start epoch to the end of training.
    None,
    /// Counts restart at every epoch.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// First epoch (0-based) that records confusions and enables the contrastive terms.
    pub affinity_start_epoch: usize,
    /// First epoch of the intra-class term; defaults to `affinity_start_epoch`.
    pub intra_start_epoch: Option<usize>,
    pub confusion_reset: ConfusionReset,
    /// Gradient into the prototypes through the inter loss. Only `false` is supported.
    pub prototype_grad: bool,
    pub contrast: ContrastConfig,
    /// Widths of the graph convolution layers.
    pub hidden_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            affinity_start_epoch: 10,
            intra_start_epoch: None,
            confusion_reset: ConfusionReset::None,
            prototype_grad: false,
            contrast: ContrastConfig::default(),
            hidden_channels: vec![16, 32, 32],
            embedding_dim: 32,
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(AclError::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(AclError::invalid("batch_size must be at least 2"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(AclError::invalid("lr0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AclError::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(AclError::invalid("weight_decay must be non-negative"));
        }
        if self.affinity_start_epoch > self.epochs {
            return Err(AclError::invalid("affinity_start_epoch exceeds epochs"));
        }
        if self.intra_start_epoch.is_some_and(|e| e > self.epochs) {
            return Err(AclError::invalid("intra_start_epoch exceeds epochs"));
        }
        if self.prototype_grad {
            return Err(AclError::invalid(
                "prototype_grad = true is not supported; prototypes follow the EMA only",
            ));
        }
        if self.hidden_channels.is_empty() || self.hidden_channels.contains(&0) {
            return Err(AclError::invalid("hidden_channels needs at least one positive width"));
        }
        if self.embedding_dim < 2 {
            return Err(AclError::invalid("embedding_dim must be at least 2"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(AclError::invalid("train_fraction must lie in (0, 1)"));
        }
        self.contrast.validate()
    }

    pub fn intra_start(&self) -> usize {
        self.intra_start_epoch.unwrap_or(self.affinity_start_epoch)
    }

    /// `(K, n_a)` for `class_count` classes: K is capped at `c - 1` and n_a
    /// scaled with it so the threshold ratio `n_a / K` is kept.
    pub fn affinity_params(&self, class_count: usize) -> (usize, usize) {
        let k = self.contrast.k.min(class_count.saturating_sub(1)).max(1);
        if k == self.contrast.k {
            return (k, self.contrast.overlap_threshold);
        }
        let n_a = (self.contrast.overlap_threshold * k + self.contrast.k / 2) / self.contrast.k;
        (k, n_a.clamp(1, k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
    /// Mean over anchors with positives of the per-anchor intra sum divided
    /// by its positive count.
    pub intra_per_positive: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    /// Classes with a non-empty motion family.
    pub family_count: usize,
    pub mean_family_size: f64,
    pub family_recovery: Option<f64>,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn metrics_jsonl(history: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in history {
        out.push_str(&m.to_json_line()?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_metrics_jsonl(text: &str) -> Result<Vec<EpochMetrics>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(AclError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes absent from the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][pred]`, diagonal included.
    pub confusion: Vec<Vec<u64>>,
}

pub fn evaluate_params(params: &EncoderParams, graph: &SkeletonGraph, ds: &SkeletonDataset) -> Result<EvalReport> {
    if params.class_count() != ds.class_count() {
        return Err(AclError::invalid(format!(
            "model predicts {} classes, dataset has {}",
            params.class_count(),
            ds.class_count()
        )));
    }
    let c = ds.class_count();
    let mut confusion = vec![vec![0u64; c]; c];
    for (x, s) in ds.tensors()?.iter().zip(&ds.samples) {
        let pred = argmax(&encode(x, graph, params)?.logits);
        confusion[s.label][pred] += 1;
    }
    Ok(report_from_confusion(confusion))
}

fn report_from_confusion(confusion: Vec<Vec<u64>>) -> EvalReport {
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    EvalReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_class_accuracy,
        confusion,
    }
}

/// Checks the dataset against the checkpoint before evaluating.
pub fn evaluate(checkpoint: &Checkpoint, ds: &SkeletonDataset) -> Result<EvalReport> {
    checkpoint.check_compatible(ds)?;
    evaluate_params(&checkpoint.params, &ds.graph, ds)
}

/// Normalized embeddings of every sample, in dataset order.
pub fn embed_dataset(params: &EncoderParams, graph: &SkeletonGraph, ds: &SkeletonDataset) -> Result<Vec<Vec<f64>>> {
    ds.tensors()?
        .iter()
        .map(|x| encode(x, graph, params).map(|o| o.embedding))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// Splits `dataset` with the configured fraction and seed, then trains.
pub fn train(cfg: &TrainConfig, dataset: &SkeletonDataset) -> Result<TrainOutcome> {
    train_with_observer(cfg, dataset, |_| Ok(()))
}

/// Like [`train`], streaming each epoch's metrics as JSON lines to `sink`.
pub fn train_to_writer<W: Write>(cfg: &TrainConfig, dataset: &SkeletonDataset, sink: &mut W) -> Result<TrainOutcome> {
    train_with_observer(cfg, dataset, |m| {
        writeln!(sink, "{}", m.to_json_line()?)?;
        Ok(())
    })
}

pub fn train_with_observer<F>(cfg: &TrainConfig, dataset: &SkeletonDataset, observer: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    dataset.validate()?;
    let (train_set, eval_set) = split_dataset(dataset, cfg.train_fraction, cfg.seed)?;
    if cfg.batch_size > train_set.len() {
        return Err(AclError::invalid(format!(
            "batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            train_set.len()
        )));
    }
    train_on_split(cfg, &train_set, Some(&eval_set), observer)
}

/// Training on an explicit split; `eval_set` only feeds eval accuracy.
pub fn train_on_split<F>(
    cfg: &TrainConfig,
    train_set: &SkeletonDataset,
    eval_set: Option<&SkeletonDataset>,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    let c = train_set.class_count();
    let graph = &train_set.graph;
    let (k, n_a) = cfg.affinity_params(c);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut channels = vec![train_set.meta.channels];
    channels.extend(&cfg.hidden_channels);
    let mut params = EncoderParams::init(&channels, c, cfg.embedding_dim, &mut init_rng)?;
    let mut optimizer = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let mut bank = PrototypeBank::new(c, cfg.embedding_dim, cfg.contrast.prototype_momentum)?;
    let mut stats = ConfusionStats::new(c);
    let mut affinity = AffinityModel::empty(c, k, n_a)?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);

    let inputs: Vec<DenseTensor> = train_set.tensors()?;
    let labels = train_set.labels();
    let planted = train_set.meta.planted_families.clone();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
        let affinity_on = epoch >= cfg.affinity_start_epoch;
        let intra_on = epoch >= cfg.intra_start();
        if affinity_on && cfg.confusion_reset == ConfusionReset::PerEpoch {
            stats.clear();
        }
        let contrast = ContrastConfig {
            lambda_inter: if affinity_on { cfg.contrast.lambda_inter } else { 0.0 },
            lambda_intra: if intra_on { cfg.contrast.lambda_intra } else { 0.0 },
            ..cfg.contrast
        };

        order.shuffle(&mut order_rng);
        let mut sums = LossBreakdown::default();
        let mut per_positive_sum = 0.0;
        let mut per_positive_batches = 0usize;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let xs: Vec<&DenseTensor> = chunk.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = batch_loss(&params, graph, &xs, &ys, &affinity, &bank, &contrast)?;
            optimizer.step(&mut params, &out.gradients, lr)?;
            if affinity_on {
                stats.record(&ys, &out.predictions)?;
            }
            for class in 0..c {
                let feats: Vec<&[f64]> = ys
                    .iter()
                    .zip(&out.embeddings)
                    .filter(|(&y, _)| y == class)
                    .map(|(_, e)| e.as_slice())
                    .collect();
                if !feats.is_empty() {
                    bank.ema_update(class, &feats)?;
                }
            }

            let b = &out.breakdown;
            sums.ce += b.ce;
            sums.inter += b.inter;
            sums.intra += b.intra;
            sums.total += b.total;
            if b.intra_positives > 0 {
                per_positive_sum += b.intra_sum / b.intra_positives as f64;
                per_positive_batches += 1;
            }
            batches += 1;
            correct += ys.iter().zip(&out.predictions).filter(|(y, p)| y == p).count();
            seen += ys.len();
        }

        if affinity_on {
            affinity = AffinityModel::build(&stats, k, n_a)?;
        }
        let eval_accuracy = eval_set
            .map(|ds| evaluate_params(&params, graph, ds).map(|r| r.accuracy))
            .transpose()?;
        let families = affinity.families();
        let sizes: Vec<usize> = families.sizes().into_iter().filter(|&s| s > 0).collect();
        let inv = 1.0 / batches.max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            lr,
            ce: sums.ce * inv,
            inter: sums.inter * inv,
            intra: sums.intra * inv,
            total: sums.total * inv,
            intra_per_positive: if per_positive_batches > 0 {
                per_positive_sum / per_positive_batches as f64
            } else {
                0.0
            },
            train_accuracy: correct as f64 / seen.max(1) as f64,
            eval_accuracy,
            family_count: sizes.len(),
            mean_family_size: if sizes.is_empty() {
                0.0
            } else {
                sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
            },
            family_recovery: planted.as_deref().map(|p| family_recovery_f1(families, p)),
        };
        if !metrics.total.is_finite() {
            return Err(AclError::NonFinite(format!("epoch {epoch} loss")));
        }
        observer(&metrics)?;
        history.push(metrics);
    }

    let checkpoint = Checkpoint {
        config: cfg.clone(),
        epochs_completed: cfg.epochs,
        class_count: c,
        channels: train_set.meta.channels,
        frames: train_set.meta.frames,
        joints: train_set.meta.joints,
        affinity_k: k,
        affinity_n_a: n_a,
        metrics_tail: history.last().cloned().into_iter().collect(),
        params,
        prototypes: bank,
        confusion: stats,
    };
    Ok(TrainOutcome { checkpoint, history })
}
