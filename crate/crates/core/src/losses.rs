//! Cross-entropy, the prototype-based inter-class affinity loss, the
//! margin-based intra-class loss and their weighted combination over a batch.

use serde::{Deserialize, Serialize};

use crate::affinity::AffinityModel;
use crate::backbone::{self, EncoderParams, SkeletonGraph};
use crate::error::{AclError, Result};
use crate::numerics::{dot, norm, softmax, stable_log_sum_exp, DenseTensor, GradEvaluation, ParamSet};
use crate::prototypes::PrototypeBank;

/// Tolerance on `‖v‖ = 1` for inputs of [`intra_marginal_loss`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    /// Margin ε folded into the positive logit of the intra-class loss.
    pub margin: f64,
    /// Intra-class temperature τ.
    pub temperature: f64,
    /// Neighbor count K; also the family-size step of the inter temperature.
    pub k: usize,
    /// Overlap threshold n_a, families keep `w > n_a / K`.
    pub overlap_threshold: usize,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    /// EMA momentum γ of the class prototypes.
    pub prototype_momentum: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            temperature: 0.1,
            k: 10,
            overlap_threshold: 4,
            lambda_inter: 0.1,
            lambda_intra: 0.1,
            prototype_momentum: 0.9,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(AclError::invalid("margin must be a finite non-negative number"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(AclError::invalid("temperature must be positive"));
        }
        if self.k == 0 {
            return Err(AclError::invalid("K must be positive"));
        }
        if self.overlap_threshold == 0 || self.overlap_threshold > self.k {
            return Err(AclError::invalid("overlap threshold must lie in 1..=K"));
        }
        if !(self.lambda_inter >= 0.0 && self.lambda_intra >= 0.0) {
            return Err(AclError::invalid("loss weights must be non-negative"));
        }
        if !(self.prototype_momentum > 0.0 && self.prototype_momentum < 1.0) {
            return Err(AclError::invalid("prototype momentum must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Batch-averaged loss terms. A term whose weight is zero is not evaluated
/// and reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub batch_size: usize,
    /// Anchors whose family and prototypes were available.
    pub inter_anchors: usize,
    /// Anchors with at least one in-batch positive.
    pub intra_anchors: usize,
    /// Positive pairs summed over anchors.
    pub intra_positives: usize,
    /// Sum of per-anchor intra losses before averaging.
    pub intra_sum: f64,
}

pub fn total_loss(ce: f64, inter: f64, intra: f64, lambda_inter: f64, lambda_intra: f64) -> f64 {
    ce + lambda_inter * inter + lambda_intra * intra
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        Err(AclError::LabelOutOfRange { label, classes })
    } else {
        Ok(())
    }
}

/// `LSE(logits) - logits[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok(stable_log_sum_exp(logits)? - logits[label])
}

/// Value and gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_label(label, logits.len())?;
    let value = stable_log_sum_exp(logits)? - logits[label];
    let mut grad = softmax(logits)?;
    grad[label] -= 1.0;
    Ok((value, grad))
}

/// Inter-class term for one anchor: value and gradient w.r.t. `f`.
/// `None` when the family is empty or a needed prototype is not initialized.
pub fn inter_affinity_grad(
    f: &[f64],
    class: usize,
    bank: &PrototypeBank,
    family: &[usize],
    tau_w: f64,
) -> Option<(f64, Vec<f64>)> {
    if family.is_empty() {
        return None;
    }
    let own = bank.get(class)?;
    let members: Vec<&[f64]> = family.iter().map(|&a| bank.get(a)).collect::<Option<_>>()?;
    let anchors: Vec<&[f64]> = std::iter::once(own).chain(members).collect();
    let logits: Vec<f64> = anchors.iter().map(|m| dot(f, m) / tau_w).collect();
    let value = stable_log_sum_exp(&logits).expect("non-empty") - logits[0];
    let weights = softmax(&logits).expect("non-empty");
    let mut grad = vec![0.0; f.len()];
    for (k, (m, p)) in anchors.iter().zip(&weights).enumerate() {
        let coeff = (p - if k == 0 { 1.0 } else { 0.0 }) / tau_w;
        for (g, x) in grad.iter_mut().zip(m.iter()) {
            *g += coeff * x;
        }
    }
    Some((value, grad))
}

/// `-ln[ exp(f·m_i/τ_w) / (exp(f·m_i/τ_w) + Σ_{a∈W(i)} exp(f·m_a/τ_w)) ]`,
/// or 0 when there is nothing to contrast against.
pub fn inter_affinity_loss(f: &[f64], class: usize, bank: &PrototypeBank, family: &[usize], tau_w: f64) -> f64 {
    inter_affinity_grad(f, class, bank, family, tau_w).map_or(0.0, |(v, _)| v)
}

/// Intra-class term for one anchor together with gradients w.r.t. the
/// anchor, each positive and each negative. Inputs are used as given.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraGrad {
    pub value: f64,
    pub d_anchor: Vec<f64>,
    pub d_positives: Vec<Vec<f64>>,
    pub d_negatives: Vec<Vec<f64>>,
}

pub fn intra_marginal_grad<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    anchor: &[f64],
    positives: &[A],
    negatives: &[B],
    margin: f64,
    temperature: f64,
) -> IntraGrad {
    let dim = anchor.len();
    let neg_logits: Vec<f64> = negatives
        .iter()
        .map(|v| dot(anchor, v.as_ref()) / temperature)
        .collect();
    let mut value = 0.0;
    let mut d_anchor = vec![0.0; dim];
    let mut d_positives = vec![vec![0.0; dim]; positives.len()];
    let mut d_negatives = vec![vec![0.0; dim]; negatives.len()];
    let mut logits = Vec::with_capacity(1 + negatives.len());
    for (u, pos) in positives.iter().enumerate() {
        let pos = pos.as_ref();
        let s = dot(anchor, pos);
        logits.clear();
        logits.push((s - margin) / temperature);
        logits.extend_from_slice(&neg_logits);
        value += stable_log_sum_exp(&logits).expect("non-empty") - s / temperature;
        let weights = softmax(&logits).expect("non-empty");

        let c_pos = (weights[0] - 1.0) / temperature;
        for k in 0..dim {
            d_anchor[k] += c_pos * pos[k];
            d_positives[u][k] += c_pos * anchor[k];
        }
        for (v, neg) in negatives.iter().enumerate() {
            let neg = neg.as_ref();
            let c_neg = weights[1 + v] / temperature;
            for k in 0..dim {
                d_anchor[k] += c_neg * neg[k];
                d_negatives[v][k] += c_neg * anchor[k];
            }
        }
    }
    IntraGrad {
        value,
        d_anchor,
        d_positives,
        d_negatives,
    }
}

/// `-Σ_u ln[ exp(s_u⁺/τ) / (exp((s_u⁺-ε)/τ) + Σ_v exp(s_v⁻/τ)) ]` with cosine
/// similarities of unit vectors.
pub fn intra_marginal_loss<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    anchor: &[f64],
    positives: &[A],
    negatives: &[B],
    margin: f64,
    temperature: f64,
) -> Result<f64> {
    let all = std::iter::once(anchor)
        .chain(positives.iter().map(AsRef::as_ref))
        .chain(negatives.iter().map(AsRef::as_ref));
    for (k, v) in all.enumerate() {
        if v.len() != anchor.len() {
            return Err(AclError::shape("embedding lengths differ"));
        }
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(AclError::invalid(format!(
                "embedding {k} has norm {n}, expected unit length"
            )));
        }
    }
    Ok(intra_marginal_grad(anchor, positives, negatives, margin, temperature).value)
}

/// Loss terms and their gradients w.r.t. the logits and (unit) embeddings of
/// every sample in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLoss {
    pub breakdown: LossBreakdown,
    pub d_logits: Vec<Vec<f64>>,
    pub d_embeddings: Vec<Vec<f64>>,
}

/// Every sample is an anchor. Positives are the other same-class samples,
/// negatives every different-class sample. Prototypes are constants.
pub fn head_losses(
    logits: &[Vec<f64>],
    embeddings: &[Vec<f64>],
    labels: &[usize],
    affinity: &AffinityModel,
    bank: &PrototypeBank,
    cfg: &ContrastConfig,
) -> Result<HeadLoss> {
    let b = labels.len();
    if b < 2 {
        return Err(AclError::invalid(format!("batch needs at least 2 samples, got {b}")));
    }
    if logits.len() != b || embeddings.len() != b {
        return Err(AclError::shape("logits, embeddings and labels differ in length"));
    }
    let inv_b = 1.0 / b as f64;
    let dim = embeddings[0].len();
    let mut breakdown = LossBreakdown {
        lambda_inter: cfg.lambda_inter,
        lambda_intra: cfg.lambda_intra,
        batch_size: b,
        ..LossBreakdown::default()
    };
    let mut d_logits = Vec::with_capacity(b);
    for (z, &y) in logits.iter().zip(labels) {
        let (v, mut g) = cross_entropy_grad(z, y)?;
        breakdown.ce += v;
        g.iter_mut().for_each(|x| *x *= inv_b);
        d_logits.push(g);
    }
    breakdown.ce *= inv_b;

    let mut d_embeddings = vec![vec![0.0; dim]; b];

    if cfg.lambda_inter > 0.0 {
        let mut terms = Vec::new();
        for (n, (f, &y)) in embeddings.iter().zip(labels).enumerate() {
            if y >= affinity.class_count() || y >= bank.class_count() {
                return Err(AclError::LabelOutOfRange {
                    label: y,
                    classes: affinity.class_count().min(bank.class_count()),
                });
            }
            let family = affinity.families().of(y);
            if let Some(t) = inter_affinity_grad(f, y, bank, family, affinity.family_temperature(y)) {
                terms.push((n, t));
            }
        }
        if !terms.is_empty() {
            let inv_a = 1.0 / terms.len() as f64;
            let scale = cfg.lambda_inter * inv_a;
            for (n, (v, g)) in &terms {
                breakdown.inter += v;
                for (d, x) in d_embeddings[*n].iter_mut().zip(g) {
                    *d += scale * x;
                }
            }
            breakdown.inter *= inv_a;
            breakdown.inter_anchors = terms.len();
        }
    }

    if cfg.lambda_intra > 0.0 {
        let scale = cfg.lambda_intra * inv_b;
        for a in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&j| j != a && labels[j] == labels[a]).collect();
            if pos.is_empty() {
                continue;
            }
            let neg: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[a]).collect();
            let pos_v: Vec<&[f64]> = pos.iter().map(|&j| embeddings[j].as_slice()).collect();
            let neg_v: Vec<&[f64]> = neg.iter().map(|&j| embeddings[j].as_slice()).collect();
            let g = intra_marginal_grad(&embeddings[a], &pos_v, &neg_v, cfg.margin, cfg.temperature);
            breakdown.intra_sum += g.value;
            breakdown.intra_anchors += 1;
            breakdown.intra_positives += pos.len();
            let mut add = |n: usize, grad: &[f64]| {
                for (d, x) in d_embeddings[n].iter_mut().zip(grad) {
                    *d += scale * x;
                }
            };
            add(a, &g.d_anchor);
            for (&j, gj) in pos.iter().zip(&g.d_positives) {
                add(j, gj);
            }
            for (&j, gj) in neg.iter().zip(&g.d_negatives) {
                add(j, gj);
            }
        }
        breakdown.intra = breakdown.intra_sum * inv_b;
    }

    breakdown.total = total_loss(
        breakdown.ce,
        breakdown.inter,
        breakdown.intra,
        cfg.lambda_inter,
        cfg.lambda_intra,
    );
    if !breakdown.total.is_finite() {
        return Err(AclError::NonFinite("batch loss".into()));
    }
    Ok(HeadLoss {
        breakdown,
        d_logits,
        d_embeddings,
    })
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub gradients: EncoderParams,
    /// Argmax predictions, ties to the smallest class index.
    pub predictions: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Forward and backward pass of the full objective over one batch.
pub fn batch_loss(
    params: &EncoderParams,
    graph: &SkeletonGraph,
    inputs: &[&DenseTensor],
    labels: &[usize],
    affinity: &AffinityModel,
    bank: &PrototypeBank,
    cfg: &ContrastConfig,
) -> Result<BatchLoss> {
    if inputs.len() != labels.len() {
        return Err(AclError::shape("inputs and labels differ in length"));
    }
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut caches = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (out, cache) = backbone::encode_with_cache(x, graph, params)?;
        outputs.push(out);
        caches.push(cache);
    }
    let logits: Vec<Vec<f64>> = outputs.iter().map(|o| o.logits.clone()).collect();
    let embeddings: Vec<Vec<f64>> = outputs.into_iter().map(|o| o.embedding).collect();
    let head = head_losses(&logits, &embeddings, labels, affinity, bank, cfg)?;

    let mut gradients = params.zeros_like();
    for ((cache, dl), de) in caches.iter().zip(&head.d_logits).zip(&head.d_embeddings) {
        backbone::backward(graph, params, cache, dl, de, &mut gradients);
    }
    Ok(BatchLoss {
        breakdown: head.breakdown,
        gradients,
        predictions: logits.iter().map(|z| argmax(z)).collect(),
        embeddings,
    })
}

/// [`batch_loss`] as a function of named parameters, for gradient checking.
#[allow(clippy::too_many_arguments)]
pub fn batch_grad_evaluation(
    template: &EncoderParams,
    point: &ParamSet,
    graph: &SkeletonGraph,
    inputs: &[&DenseTensor],
    labels: &[usize],
    affinity: &AffinityModel,
    bank: &PrototypeBank,
    cfg: &ContrastConfig,
) -> Result<GradEvaluation> {
    let params = template.with_param_set(point)?;
    let out = batch_loss(&params, graph, inputs, labels, affinity, bank, cfg)?;
    Ok(GradEvaluation {
        value: out.breakdown.total,
        gradients: out.gradients.to_param_set(),
    })
}
