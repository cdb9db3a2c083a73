//! Double-precision kernels shared by the encoder and the loss heads.
//!
//! Every reduction runs left to right in a fixed order so repeated
//! evaluations are bit-identical.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AclError, Result};

/// Row-major `f64` tensor with validated shape and finite contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(AclError::shape(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AclError::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(AclError::NonFinite(format!("tensor element {pos}")));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Named parameter tensors, iterated in name order.
pub type ParamSet = BTreeMap<String, DenseTensor>;

/// A scalar loss value together with its gradient for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEvaluation {
    pub value: f64,
    pub gradients: ParamSet,
}

/// `max(v) + ln Σ exp(v - max(v))`.
pub fn stable_log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(AclError::EmptyReduction)?;
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Softmax weights matching [`stable_log_sum_exp`]; these are its gradient.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    let lse = stable_log_sum_exp(values)?;
    Ok(values.iter().map(|v| (v - lse).exp()).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub const NORMALIZE_EPS: f64 = 1e-12;

/// `v / max(‖v‖, eps)`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let scale = norm(v).max(eps);
    v.iter().map(|x| x / scale).collect()
}

/// Pulls `d_out` (gradient w.r.t. the normalized vector) back to the raw
/// input `v` of [`l2_normalize`].
pub fn l2_normalize_backward(v: &[f64], eps: f64, d_out: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < eps {
        return d_out.iter().map(|g| g / eps).collect();
    }
    let proj = dot(v, d_out) / (n * n);
    v.iter().zip(d_out).map(|(x, g)| (g - x * proj) / n).collect()
}

/// Compares the analytic gradient of `loss` at `point` against central
/// differences and returns the worst `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_grad_check<F>(loss: F, point: &ParamSet, step: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<GradEvaluation>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AclError::invalid(format!("step must be positive, got {step}")));
    }
    let base = loss(point)?;
    if !base.value.is_finite() {
        return Err(AclError::NonFinite("loss at base point".into()));
    }
    if base.gradients.len() != point.len() {
        return Err(AclError::shape(format!(
            "gradient covers {} parameters, point has {}",
            base.gradients.len(),
            point.len()
        )));
    }

    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for (name, tensor) in point {
        let analytic = base
            .gradients
            .get(name)
            .ok_or_else(|| AclError::shape(format!("missing gradient for {name}")))?;
        if analytic.shape() != tensor.shape() {
            return Err(AclError::shape(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                analytic.shape(),
                tensor.shape()
            )));
        }
        for idx in 0..tensor.len() {
            let original = tensor.values()[idx];
            let mut eval_at = |x: f64| -> Result<f64> {
                probe.get_mut(name).expect("cloned key").values_mut()[idx] = x;
                let v = loss(&probe)?.value;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(AclError::NonFinite(format!("{name}[{idx}]")))
                }
            };
            let plus = eval_at(original + step)?;
            let minus = eval_at(original - step)?;
            probe.get_mut(name).expect("cloned key").values_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.values()[idx] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_examples() {
        assert_eq!(stable_log_sum_exp(&[0.0]).unwrap(), 0.0);
        let a = -3.25;
        assert!((stable_log_sum_exp(&[a, a]).unwrap() - (a + 2f64.ln())).abs() < 1e-15);
        // exp(1000) overflows; the shifted form nets 1000 + ln 2 = 1000.693147180559945...
        let big = stable_log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - 1_000.693_147_180_559_9).abs() < 1e-12);
        assert!(matches!(stable_log_sum_exp(&[]), Err(AclError::EmptyReduction)));
        assert!(stable_log_sum_exp(&[1e6, -1e6]).unwrap().is_finite());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0], NORMALIZE_EPS), vec![0.6, 0.8]);
        let u = l2_normalize(&[0.3, -0.2, 0.9], NORMALIZE_EPS);
        let uu = l2_normalize(&u, NORMALIZE_EPS);
        for (a, b) in u.iter().zip(&uu) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(l2_normalize(&[0.0, 0.0], NORMALIZE_EPS), vec![0.0, 0.0]);
    }

    #[test]
    fn tensor_validation() {
        assert!(DenseTensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(DenseTensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            DenseTensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(AclError::NonFinite(_))
        ));
    }

    fn half_square(p: &ParamSet) -> Result<GradEvaluation> {
        let mut value = 0.0;
        let mut gradients = ParamSet::new();
        for (k, t) in p {
            value += 0.5 * dot(t.values(), t.values());
            gradients.insert(k.clone(), t.clone());
        }
        Ok(GradEvaluation { value, gradients })
    }

    #[test]
    fn grad_check_half_square() {
        let mut p = ParamSet::new();
        p.insert("a".into(), DenseTensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap());
        p.insert("b".into(), DenseTensor::new(vec![1, 2], vec![1e-3, 40.0]).unwrap());
        let err = finite_diff_grad_check(half_square, &p, 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn grad_check_names_non_finite_coordinate() {
        let mut p = ParamSet::new();
        p.insert("x".into(), DenseTensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let f = |p: &ParamSet| {
            let v = p["x"].values();
            Ok(GradEvaluation {
                value: v[0] + v[1].ln(),
                gradients: [("x".to_string(), DenseTensor::new(vec![2], vec![1.0, 1.0]).unwrap())]
                    .into_iter()
                    .collect(),
            })
        };
        // base point has ln(0) = -inf
        assert!(matches!(
            finite_diff_grad_check(f, &p, 1e-5),
            Err(AclError::NonFinite(_))
        ));
        p.get_mut("x").unwrap().values_mut()[1] = 1e-6;
        match finite_diff_grad_check(f, &p, 1e-5) {
            Err(AclError::NonFinite(at)) => assert_eq!(at, "x[1]"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_detects_wrong_gradient() {
        let mut p = ParamSet::new();
        p.insert("x".into(), DenseTensor::new(vec![1], vec![2.0]).unwrap());
        let wrong = |p: &ParamSet| {
            let mut g = p.clone();
            g.get_mut("x").unwrap().values_mut()[0] *= 2.0;
            Ok(GradEvaluation {
                value: 0.5 * p["x"].values()[0].powi(2),
                gradients: g,
            })
        };
        assert!(finite_diff_grad_check(wrong, &p, 1e-5).unwrap() > 0.5);
    }

    #[test]
    fn normalize_backward_matches_differences() {
        let v = [0.7, -1.3, 0.2];
        let d = [0.4, 0.1, -0.9];
        let g = l2_normalize_backward(&v, NORMALIZE_EPS, &d);
        let h = 1e-6;
        for k in 0..3 {
            let mut p = v;
            let mut m = v;
            p[k] += h;
            m[k] -= h;
            let fp = dot(&l2_normalize(&p, NORMALIZE_EPS), &d);
            let fm = dot(&l2_normalize(&m, NORMALIZE_EPS), &d);
            assert!((g[k] - (fp - fm) / (2.0 * h)).abs() < 1e-8);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lse_bounds(v in prop::collection::vec(-1e6f64..1e6, 1..40)) {
                let lse = stable_log_sum_exp(&v).unwrap();
                let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lse >= max);
                prop_assert!(lse <= max + (v.len() as f64).ln() + 1e-9 * max.abs().max(1.0));
            }

            #[test]
            fn lse_shift(v in prop::collection::vec(-50f64..50.0, 1..20), c in -100f64..100.0) {
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let lhs = stable_log_sum_exp(&shifted).unwrap();
                let rhs = stable_log_sum_exp(&v).unwrap() + c;
                prop_assert!((lhs - rhs).abs() < 1e-10);
            }

            #[test]
            fn normalize_norm(v in prop::collection::vec(-1e3f64..1e3, 1..16)) {
                let n = norm(&l2_normalize(&v, NORMALIZE_EPS));
                prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-9 || norm(&v) < 1e-6);
            }
        }
    }
}
