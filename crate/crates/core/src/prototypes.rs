//! EMA class representations used as anchors by the inter-class loss.

use serde::{Deserialize, Serialize};

use crate::error::{AclError, Result};
use crate::numerics::{l2_normalize, NORMALIZE_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    dim: usize,
    momentum: f64,
    prototypes: Vec<Vec<f64>>,
    initialized: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(class_count: usize, dim: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(AclError::invalid(format!(
                "EMA momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            dim,
            momentum,
            prototypes: vec![vec![0.0; dim]; class_count],
            initialized: vec![false; class_count],
        })
    }

    /// Rebuild from stored state; every initialized vector must be unit length.
    pub fn from_parts(momentum: f64, prototypes: Vec<Vec<f64>>, initialized: Vec<bool>) -> Result<Self> {
        let dim = prototypes.first().map_or(0, Vec::len);
        let mut bank = Self::new(prototypes.len(), dim, momentum)?;
        if initialized.len() != prototypes.len() || prototypes.iter().any(|p| p.len() != dim) {
            return Err(AclError::shape("prototype arrays disagree in size"));
        }
        for (i, (p, &init)) in prototypes.iter().zip(&initialized).enumerate() {
            if init {
                let n = crate::numerics::norm(p);
                if (n - 1.0).abs() > 1e-9 {
                    return Err(AclError::invalid(format!("prototype {i} has norm {n}")));
                }
            }
        }
        bank.prototypes = prototypes;
        bank.initialized = initialized;
        Ok(bank)
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    /// `None` until the class has received its first batch.
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.initialized[class].then(|| self.prototypes[class].as_slice())
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    /// `m = normalize(γ·m + (1-γ)·mean(features))`, or `normalize(mean)` on
    /// the first update for the class.
    pub fn ema_update<F: AsRef<[f64]>>(&mut self, class: usize, features: &[F]) -> Result<()> {
        if class >= self.class_count() {
            return Err(AclError::LabelOutOfRange {
                label: class,
                classes: self.class_count(),
            });
        }
        if features.is_empty() {
            return Err(AclError::invalid("EMA update needs at least one feature"));
        }
        let mut mean = vec![0.0; self.dim];
        for f in features {
            let f = f.as_ref();
            if f.len() != self.dim {
                return Err(AclError::shape(format!("feature length {} != {}", f.len(), self.dim)));
            }
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x;
            }
        }
        let inv = 1.0 / features.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);

        let target = if self.initialized[class] {
            let g = self.momentum;
            self.prototypes[class]
                .iter()
                .zip(&mean)
                .map(|(m, b)| g * m + (1.0 - g) * b)
                .collect::<Vec<_>>()
        } else {
            mean
        };
        self.prototypes[class] = l2_normalize(&target, NORMALIZE_EPS);
        self.initialized[class] = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;

    #[test]
    fn first_update_initializes() {
        let mut b = PrototypeBank::new(3, 2, 0.9).unwrap();
        assert!(b.get(1).is_none());
        b.ema_update(1, &[[0.6, 0.8]]).unwrap();
        assert_eq!(b.get(1).unwrap(), &[0.6, 0.8]);
        assert!(b.get(0).is_none());
    }

    #[test]
    fn momentum_step() {
        let mut b = PrototypeBank::new(1, 2, 0.9).unwrap();
        b.ema_update(0, &[[1.0, 0.0]]).unwrap();
        b.ema_update(0, &[[0.0, 1.0]]).unwrap();
        // (0.9, 0.1) / sqrt(0.82)
        let s = 0.82f64.sqrt();
        let m = b.get(0).unwrap();
        assert!((m[0] - 0.9 / s).abs() < 1e-15 && (m[1] - 0.1 / s).abs() < 1e-15);
        assert!((m[0] - 0.99388).abs() < 1e-5 && (m[1] - 0.11043).abs() < 1e-5);
    }

    #[test]
    fn fixed_point_and_errors() {
        let mut b = PrototypeBank::new(2, 2, 0.9).unwrap();
        b.ema_update(0, &[[0.6, 0.8]]).unwrap();
        b.ema_update(0, &[[0.6, 0.8], [0.6, 0.8]]).unwrap();
        let m = b.get(0).unwrap();
        assert!((m[0] - 0.6).abs() < 1e-15 && (m[1] - 0.8).abs() < 1e-15);
        let empty: [[f64; 2]; 0] = [];
        assert!(b.ema_update(0, &empty).is_err());
        assert!(b.ema_update(2, &[[1.0, 0.0]]).is_err());
        assert!(PrototypeBank::new(2, 2, 1.0).is_err());
    }

    #[test]
    fn converges_to_constant_mean() {
        let mut b = PrototypeBank::new(1, 3, 0.9).unwrap();
        b.ema_update(0, &[[1.0, 0.0, 0.0]]).unwrap();
        let target = l2_normalize(&[0.2, -0.5, 0.4], NORMALIZE_EPS);
        let dist = |b: &PrototypeBank| {
            let m = b.get(0).unwrap();
            norm(&m.iter().zip(&target).map(|(x, y)| x - y).collect::<Vec<_>>())
        };
        let mut prev = dist(&b);
        for _ in 0..100 {
            b.ema_update(0, std::slice::from_ref(&target)).unwrap();
            let d = dist(&b);
            assert!(d < prev, "distance must shrink");
            prev = d;
            assert!((norm(b.get(0).unwrap()) - 1.0).abs() < 1e-9);
        }
        assert!(prev < 1e-3, "{prev}");
    }

    #[test]
    fn distinct_classes_commute() {
        let mut a = PrototypeBank::new(2, 2, 0.9).unwrap();
        let mut b = a.clone();
        a.ema_update(0, &[[1.0, 0.0]]).unwrap();
        a.ema_update(1, &[[0.0, 1.0]]).unwrap();
        b.ema_update(1, &[[0.0, 1.0]]).unwrap();
        b.ema_update(0, &[[1.0, 0.0]]).unwrap();
        assert_eq!(a, b);
    }
}
