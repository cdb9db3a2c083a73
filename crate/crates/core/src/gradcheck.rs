//! Randomized finite-difference checks of every hand-written gradient.
//!
//! Each trial draws a small random configuration, wraps the loss as a
//! function of named raw parameters and hands it to
//! [`finite_diff_grad_check`]. Embeddings are parameterized before
//! normalization so the chain through [`l2_normalize`] is covered too.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::affinity::AffinityModel;
use crate::backbone::{EncoderParams, SkeletonGraph};
use crate::error::Result;
use crate::losses::{
    batch_grad_evaluation, cross_entropy_grad, inter_affinity_grad, intra_marginal_grad, ContrastConfig,
};
use crate::numerics::{
    finite_diff_grad_check, l2_normalize, l2_normalize_backward, DenseTensor, GradEvaluation, ParamSet, NORMALIZE_EPS,
};
use crate::prototypes::PrototypeBank;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error seen per loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub step: f64,
    pub cross_entropy: f64,
    pub inter: f64,
    pub intra: f64,
    pub batch: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.cross_entropy.max(self.inter).max(self.intra).max(self.batch)
    }

    pub fn passes(&self) -> bool {
        self.worst() <= TOLERANCE
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn tensor(shape: Vec<usize>, values: Vec<f64>) -> DenseTensor {
    DenseTensor::new(shape, values).expect("generated values are finite and sized")
}

fn unit_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    l2_normalize(&normal_vec(rng, n, 1.0), NORMALIZE_EPS)
}

fn random_bank(rng: &mut impl Rng, classes: usize, dim: usize) -> PrototypeBank {
    let protos = (0..classes).map(|_| unit_vec(rng, dim)).collect();
    PrototypeBank::from_parts(0.9, protos, vec![true; classes]).expect("unit prototypes")
}

fn rows(t: &DenseTensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().expect("rank >= 1");
    t.values().chunks_exact(d).map(<[f64]>::to_vec).collect()
}

pub fn check_cross_entropy(rng: &mut impl Rng, step: f64) -> Result<f64> {
    let c = rng.random_range(2..=12);
    let label = rng.random_range(0..c);
    let mut point = ParamSet::new();
    point.insert("logits".into(), tensor(vec![c], normal_vec(rng, c, 2.0)));
    finite_diff_grad_check(
        |p: &ParamSet| {
            let (value, grad) = cross_entropy_grad(p["logits"].values(), label)?;
            let gradients = ParamSet::from([("logits".to_string(), DenseTensor::new(vec![c], grad)?)]);
            Ok(GradEvaluation { value, gradients })
        },
        &point,
        step,
    )
}

pub fn check_inter(rng: &mut impl Rng, step: f64) -> Result<f64> {
    let d = rng.random_range(2..=16);
    let c = rng.random_range(3..=8);
    let bank = random_bank(rng, c, d);
    let class = rng.random_range(0..c);
    let mut others: Vec<usize> = (0..c).filter(|&j| j != class).collect();
    others.shuffle(rng);
    others.truncate(rng.random_range(1..c));
    others.sort_unstable();
    let tau = [0.1, 0.5, 1.0][rng.random_range(0..3)];
    let mut point = ParamSet::new();
    point.insert("feature".into(), tensor(vec![d], normal_vec(rng, d, 1.0)));
    finite_diff_grad_check(
        |p: &ParamSet| {
            let raw = p["feature"].values();
            let f = l2_normalize(raw, NORMALIZE_EPS);
            let (value, g) =
                inter_affinity_grad(&f, class, &bank, &others, tau).expect("family and bank are populated");
            let grad = l2_normalize_backward(raw, NORMALIZE_EPS, &g);
            let gradients = ParamSet::from([("feature".to_string(), DenseTensor::new(vec![d], grad)?)]);
            Ok(GradEvaluation { value, gradients })
        },
        &point,
        step,
    )
}

pub fn check_intra(rng: &mut impl Rng, step: f64) -> Result<f64> {
    let d = rng.random_range(2..=16);
    let n_pos = rng.random_range(1..=4);
    let n_neg = rng.random_range(0..=5);
    let margin = rng.random_range(0.0..0.3);
    let tau = [0.1, 0.2, 0.5][rng.random_range(0..3)];
    let mut point = ParamSet::new();
    point.insert("anchor".into(), tensor(vec![d], normal_vec(rng, d, 1.0)));
    point.insert(
        "positives".into(),
        tensor(vec![n_pos, d], normal_vec(rng, n_pos * d, 1.0)),
    );
    if n_neg > 0 {
        point.insert(
            "negatives".into(),
            tensor(vec![n_neg, d], normal_vec(rng, n_neg * d, 1.0)),
        );
    }
    finite_diff_grad_check(
        |p: &ParamSet| {
            let raw_a = p["anchor"].values();
            let raw_p = rows(&p["positives"]);
            let raw_n = p.get("negatives").map(rows).unwrap_or_default();
            let unit = |v: &Vec<f64>| l2_normalize(v, NORMALIZE_EPS);
            let a = l2_normalize(raw_a, NORMALIZE_EPS);
            let pos: Vec<Vec<f64>> = raw_p.iter().map(unit).collect();
            let neg: Vec<Vec<f64>> = raw_n.iter().map(unit).collect();
            let g = intra_marginal_grad(&a, &pos, &neg, margin, tau);
            let back = |raw: &[Vec<f64>], d_unit: &[Vec<f64>]| -> Vec<f64> {
                raw.iter()
                    .zip(d_unit)
                    .flat_map(|(r, du)| l2_normalize_backward(r, NORMALIZE_EPS, du))
                    .collect()
            };
            let mut gradients = ParamSet::new();
            gradients.insert(
                "anchor".into(),
                DenseTensor::new(vec![d], l2_normalize_backward(raw_a, NORMALIZE_EPS, &g.d_anchor))?,
            );
            gradients.insert(
                "positives".into(),
                DenseTensor::new(vec![n_pos, d], back(&raw_p, &g.d_positives))?,
            );
            if n_neg > 0 {
                gradients.insert(
                    "negatives".into(),
                    DenseTensor::new(vec![n_neg, d], back(&raw_n, &g.d_negatives))?,
                );
            }
            Ok(GradEvaluation {
                value: g.value,
                gradients,
            })
        },
        &point,
        step,
    )
}

/// A random skeleton-like graph: a chain plus a few extra symmetric edges.
fn random_graph(rng: &mut impl Rng, joints: usize) -> SkeletonGraph {
    let mut edges: Vec<(usize, usize)> = (1..joints).map(|j| (j - 1, j)).collect();
    for _ in 0..rng.random_range(0..=2) {
        let a = rng.random_range(0..joints);
        let b = rng.random_range(0..joints);
        if a != b && !edges.contains(&(a.min(b), a.max(b))) {
            edges.push((a.min(b), a.max(b)));
        }
    }
    SkeletonGraph::from_edges(joints, &edges).expect("valid edge list")
}

/// Neighbor sets drawn at random; `n_a = 1` so families are non-trivial.
fn random_affinity(rng: &mut impl Rng, classes: usize) -> AffinityModel {
    let k = classes - 1;
    let sets = (0..classes)
        .map(|i| {
            let mut others: Vec<usize> = (0..classes).filter(|&j| j != i).collect();
            others.shuffle(rng);
            others.truncate(rng.random_range(0..=k));
            others
        })
        .collect();
    AffinityModel::from_neighbor_sets(sets, k, 1).expect("valid neighbor sets")
}

pub fn check_batch(rng: &mut impl Rng, step: f64) -> Result<f64> {
    let joints = rng.random_range(3..=6);
    let frames = rng.random_range(2..=4);
    let c_in = rng.random_range(2..=3);
    let mut channels = vec![c_in];
    for _ in 0..rng.random_range(1..=2) {
        channels.push(rng.random_range(2..=5));
    }
    let classes = rng.random_range(3..=5);
    let dim = rng.random_range(2..=16);
    let batch = rng.random_range(2..=8);

    let graph = random_graph(rng, joints);
    let params = EncoderParams::init(&channels, classes, dim, rng)?;
    let affinity = random_affinity(rng, classes);
    let bank = random_bank(rng, classes, dim);
    // Draw labels from a subset so positives are likely.
    let pool = rng.random_range(2..=classes);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..pool)).collect();
    let inputs: Vec<DenseTensor> = (0..batch)
        .map(|_| tensor(vec![c_in, frames, joints], normal_vec(rng, c_in * frames * joints, 1.0)))
        .collect();
    let refs: Vec<&DenseTensor> = inputs.iter().collect();
    let cfg = ContrastConfig {
        lambda_inter: rng.random_range(0.05..1.0),
        lambda_intra: rng.random_range(0.05..1.0),
        ..ContrastConfig::default()
    };
    let point = params.to_param_set();
    finite_diff_grad_check(
        |p: &ParamSet| batch_grad_evaluation(&params, p, &graph, &refs, &labels, &affinity, &bank, &cfg),
        &point,
        step,
    )
}

/// Runs `trials` configurations of each check from one seeded stream.
pub fn run_grad_checks(trials: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        trials,
        step,
        cross_entropy: 0.0,
        inter: 0.0,
        intra: 0.0,
        batch: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        report.cross_entropy = report.cross_entropy.max(check_cross_entropy(&mut rng, step)?);
        report.inter = report.inter.max(check_inter(&mut rng, step)?);
        report.intra = report.intra.max(check_intra(&mut rng, step)?);
        report.batch = report.batch.max(check_batch(&mut rng, step)?);
    }
    Ok(report)
}
