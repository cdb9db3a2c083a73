//! Straight-line forward-mode reimplementation of the composite objective.
//!
//! Every operation is written out with dense loops and dual numbers, so the
//! tangent of one seeded coordinate is the exact directional derivative.
//! Nothing from the crate is reused except the input fixtures.

use std::ops::{Add, Div, Mul, Neg, Sub};

use acl_core::affinity::AffinityModel;
use acl_core::backbone::{EncoderParams, SkeletonGraph};
use acl_core::losses::{batch_loss, ContrastConfig};
use acl_core::numerics::DenseTensor;
use acl_core::prototypes::PrototypeBank;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, d: e * self.d }
    }
    fn ln(self) -> Self {
        Dual {
            v: self.v.ln(),
            d: self.d / self.v,
        }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual {
            v: s,
            d: self.d / (2.0 * s),
        }
    }
    fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Dual::c(0.0)
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

fn sum(xs: impl IntoIterator<Item = Dual>) -> Dual {
    xs.into_iter().fold(Dual::c(0.0), |a, b| a + b)
}

/// Flat parameter vector in a fixed order with its shapes.
struct Flat {
    layers: Vec<(usize, usize)>,
    classes: usize,
    dim: usize,
    hidden: usize,
}

fn flatten(p: &EncoderParams) -> (Vec<f64>, Flat) {
    let mut v = Vec::new();
    let mut layers = Vec::new();
    for t in &p.layers {
        layers.push((t.shape()[0], t.shape()[1]));
        v.extend_from_slice(t.values());
    }
    for t in [
        &p.classifier_weight,
        &p.classifier_bias,
        &p.projection_weight,
        &p.projection_bias,
    ] {
        v.extend_from_slice(t.values());
    }
    let hidden = layers.last().unwrap().1;
    let flat = Flat {
        layers,
        classes: p.classifier_bias.len(),
        dim: p.projection_bias.len(),
        hidden,
    };
    (v, flat)
}

struct Problem {
    adjacency: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    frames: usize,
    labels: Vec<usize>,
    prototypes: Vec<Vec<f64>>,
    families: Vec<Vec<usize>>,
    k: usize,
    cfg: ContrastConfig,
}

fn oracle(prob: &Problem, flat: &Flat, theta: &[Dual]) -> Dual {
    let n = prob.adjacency.len();
    let t_len = prob.frames;
    let deg: Vec<f64> = (0..n).map(|i| 1.0 + prob.adjacency[i].iter().sum::<f64>()).collect();
    let a_hat: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (prob.adjacency[i][j] + if i == j { 1.0 } else { 0.0 }) / (deg[i] * deg[j]).sqrt())
                .collect()
        })
        .collect();

    let mut off = 0;
    let mut take = |count: usize| {
        let s = &theta[off..off + count];
        off += count;
        s.to_vec()
    };
    let layer_w: Vec<Vec<Dual>> = flat.layers.iter().map(|&(i, o)| take(i * o)).collect();
    let cls_w = take(flat.hidden * flat.classes);
    let cls_b = take(flat.classes);
    let proj_w = take(flat.hidden * flat.dim);
    let proj_b = take(flat.dim);

    let mut logits_all = Vec::new();
    let mut emb_all = Vec::new();
    for x in &prob.inputs {
        // x[c][t][j]
        let mut cur: Vec<Vec<Vec<Dual>>> = (0..flat.layers[0].0)
            .map(|c| {
                (0..t_len)
                    .map(|t| (0..n).map(|j| Dual::c(x[(c * t_len + t) * n + j])).collect())
                    .collect()
            })
            .collect();
        for (l, &(cin, cout)) in flat.layers.iter().enumerate() {
            let w = &layer_w[l];
            let mut next = vec![vec![vec![Dual::c(0.0); n]; t_len]; cout];
            for (co, plane) in next.iter_mut().enumerate() {
                for (t, row) in plane.iter_mut().enumerate() {
                    for (j, out) in row.iter_mut().enumerate() {
                        let mut acc = Dual::c(0.0);
                        for ci in 0..cin {
                            let agg = sum((0..n).map(|m| Dual::c(a_hat[j][m]) * cur[ci][t][m]));
                            acc = acc + w[ci * cout + co] * agg;
                        }
                        *out = acc.relu();
                    }
                }
            }
            cur = next;
        }
        let cells = Dual::c((t_len * n) as f64);
        let pooled: Vec<Dual> = cur
            .iter()
            .map(|plane| sum(plane.iter().flatten().copied()) / cells)
            .collect();
        let logits: Vec<Dual> = (0..flat.classes)
            .map(|k| cls_b[k] + sum((0..flat.hidden).map(|h| pooled[h] * cls_w[h * flat.classes + k])))
            .collect();
        let proj: Vec<Dual> = (0..flat.dim)
            .map(|k| proj_b[k] + sum((0..flat.hidden).map(|h| pooled[h] * proj_w[h * flat.dim + k])))
            .collect();
        let len = sum(proj.iter().map(|&p| p * p)).sqrt();
        emb_all.push(proj.iter().map(|&p| p / len).collect::<Vec<_>>());
        logits_all.push(logits);
    }

    let b = prob.labels.len();
    let bf = Dual::c(b as f64);
    let ce = sum(logits_all
        .iter()
        .zip(&prob.labels)
        .map(|(z, &y)| sum(z.iter().map(|v| v.exp())).ln() - z[y]))
        / bf;

    let dotc = |f: &[Dual], m: &[f64]| sum(f.iter().zip(m).map(|(&a, &b)| a * Dual::c(b)));
    let mut inter_terms = Vec::new();
    for (f, &y) in emb_all.iter().zip(&prob.labels) {
        let fam = &prob.families[y];
        if fam.is_empty() {
            continue;
        }
        let nw = fam.len();
        let tau = if nw <= prob.k {
            0.1
        } else if nw <= 2 * prob.k {
            0.5
        } else {
            1.0
        };
        let tau = Dual::c(tau);
        let pos = (dotc(f, &prob.prototypes[y]) / tau).exp();
        let den = pos + sum(fam.iter().map(|&a| (dotc(f, &prob.prototypes[a]) / tau).exp()));
        inter_terms.push(-(pos / den).ln());
    }
    let inter = if inter_terms.is_empty() {
        Dual::c(0.0)
    } else {
        let n_terms = Dual::c(inter_terms.len() as f64);
        sum(inter_terms) / n_terms
    };

    let dotd = |a: &[Dual], b: &[Dual]| sum(a.iter().zip(b).map(|(&x, &y)| x * y));
    let tau = Dual::c(prob.cfg.temperature);
    let eps = Dual::c(prob.cfg.margin);
    let mut intra = Dual::c(0.0);
    for a in 0..b {
        let negs: Vec<Dual> = (0..b)
            .filter(|&v| prob.labels[v] != prob.labels[a])
            .map(|v| (dotd(&emb_all[a], &emb_all[v]) / tau).exp())
            .collect();
        let neg_sum = sum(negs);
        for u in (0..b).filter(|&u| u != a && prob.labels[u] == prob.labels[a]) {
            let s = dotd(&emb_all[a], &emb_all[u]);
            let den = ((s - eps) / tau).exp() + neg_sum;
            intra = intra - ((s / tau).exp() / den).ln();
        }
    }
    let intra = intra / bf;

    ce + Dual::c(prob.cfg.lambda_inter) * inter + Dual::c(prob.cfg.lambda_intra) * intra
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn run_instance(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (classes, batch, dim, joints, frames) = (4, 8, 8, 5, 3);
    let edges = [(0, 1), (1, 2), (2, 3), (1, 4)];
    let graph = SkeletonGraph::from_edges(joints, &edges).unwrap();
    let mut adjacency = vec![vec![0.0; joints]; joints];
    for &(a, b) in &edges {
        adjacency[a][b] = 1.0;
        adjacency[b][a] = 1.0;
    }
    let params = EncoderParams::init(&[3, 4, 5], classes, dim, &mut rng).unwrap();
    let k = 3;
    let sets: Vec<Vec<usize>> = (0..classes)
        .map(|i| (0..classes).filter(|&j| j != i && rng.random_bool(0.5)).collect())
        .collect();
    let affinity = AffinityModel::from_neighbor_sets(sets, k, 1).unwrap();
    let prototypes: Vec<Vec<f64>> = (0..classes).map(|_| unit(&mut rng, dim)).collect();
    let bank = PrototypeBank::from_parts(0.9, prototypes.clone(), vec![true; classes]).unwrap();
    let labels: Vec<usize> = (0..batch)
        .map(|i| if i < 4 { i % 2 } else { rng.random_range(0..classes) })
        .collect();
    let inputs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..3 * frames * joints).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let cfg = ContrastConfig {
        lambda_inter: 0.3,
        lambda_intra: 0.7,
        ..ContrastConfig::default()
    };

    let tensors: Vec<DenseTensor> = inputs
        .iter()
        .map(|x| DenseTensor::new(vec![3, frames, joints], x.clone()).unwrap())
        .collect();
    let refs: Vec<&DenseTensor> = tensors.iter().collect();
    let got = batch_loss(&params, &graph, &refs, &labels, &affinity, &bank, &cfg).unwrap();
    let (analytic, _) = flatten(&got.gradients);

    let prob = Problem {
        adjacency,
        inputs,
        frames,
        labels,
        prototypes,
        families: (0..classes).map(|i| affinity.families().of(i).to_vec()).collect(),
        k,
        cfg,
    };
    let (theta, flat) = flatten(&params);
    let consts: Vec<Dual> = theta.iter().map(|&v| Dual::c(v)).collect();
    let total = oracle(&prob, &flat, &consts);
    assert!(
        (total.v - got.breakdown.total).abs() <= 1e-10,
        "seed {seed}: total {} vs oracle {}",
        got.breakdown.total,
        total.v
    );
    for idx in 0..theta.len() {
        let mut seeded = consts.clone();
        seeded[idx].d = 1.0;
        let g = oracle(&prob, &flat, &seeded).d;
        assert!(
            (g - analytic[idx]).abs() <= 1e-10,
            "seed {seed}, coordinate {idx}: analytic {} vs oracle {g}",
            analytic[idx]
        );
    }
}

#[test]
fn batch_loss_matches_straight_line_oracle() {
    for seed in 0..5 {
        run_instance(seed);
    }
}
