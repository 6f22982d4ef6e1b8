//! Class-imbalance aware classification losses.
//!
//! The public functions score a single prediction. Training goes through
//! [`ResolvedLoss`], which works on logits and also returns the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Weighted categorical cross-entropy.
    Wce,
    Focal {
        gamma: f64,
    },
    Ldam {
        max_margin: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    Uniform,
    /// Inverse class frequency computed from the training labels.
    Balanced,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub weights: ClassWeighting,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::Wce,
            weights: ClassWeighting::Uniform,
        }
    }
}

impl LossSpec {
    pub fn focal(gamma: f64) -> Self {
        LossSpec {
            kind: LossKind::Focal { gamma },
            weights: ClassWeighting::Uniform,
        }
    }

    pub fn ldam(max_margin: f64) -> Self {
        LossSpec {
            kind: LossKind::Ldam { max_margin },
            weights: ClassWeighting::Uniform,
        }
    }

    pub fn weighted(mut self) -> Self {
        self.weights = ClassWeighting::Balanced;
        self
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self.kind {
            LossKind::Focal { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                return Err(Error::invalid("focal gamma must be finite and >= 0"))
            }
            LossKind::Ldam { max_margin } if !(max_margin >= 0.0 && max_margin.is_finite()) => {
                return Err(Error::invalid("LDAM margin must be finite and >= 0"))
            }
            _ => {}
        }
        if let ClassWeighting::Explicit(w) = &self.weights {
            if w.len() != n_classes {
                return Err(Error::Dimension {
                    expected: n_classes,
                    found: w.len(),
                });
            }
            if w.iter().any(|&v| v.is_nan() || v < 0.0 || !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
                return Err(Error::invalid("class weights must be non-negative and not all zero"));
            }
        }
        Ok(())
    }

    /// Binds the spec to the training label distribution.
    pub fn resolve(&self, counts: &[usize]) -> Result<ResolvedLoss> {
        self.validate(counts.len())?;
        let weights = match &self.weights {
            ClassWeighting::Uniform => vec![1.0; counts.len()],
            ClassWeighting::Balanced => lenient_class_weights(counts),
            ClassWeighting::Explicit(w) => w.clone(),
        };
        let margins = match self.kind {
            LossKind::Ldam { max_margin } => lenient_margins(counts, max_margin),
            _ => vec![0.0; counts.len()],
        };
        Ok(ResolvedLoss {
            kind: self.kind,
            weights,
            margins,
        })
    }
}

/// Weights inversely proportional to class counts, normalised to sum to one.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "class {c} has no samples; drop it before weighting"
        )));
    }
    if counts.is_empty() {
        return Err(Error::invalid("no classes to weight"));
    }
    Ok(lenient_class_weights(counts))
}

/// As [`class_weights`] but absent classes get weight zero.
pub(crate) fn lenient_class_weights(counts: &[usize]) -> Vec<f64> {
    let inv: Vec<f64> = counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
        .collect();
    let total: f64 = inv.iter().sum();
    if total == 0.0 {
        return vec![1.0 / counts.len().max(1) as f64; counts.len()];
    }
    inv.iter().map(|w| w / total).collect()
}

/// Per-class LDAM margins: `max_margin * (n_min / n_c)^(1/4)`.
pub fn ldam_margins(counts: &[usize], max_margin: f64) -> Result<Vec<f64>> {
    if counts.contains(&0) {
        return Err(Error::invalid("LDAM margins need at least one sample per class"));
    }
    Ok(lenient_margins(counts, max_margin))
}

fn lenient_margins(counts: &[usize], max_margin: f64) -> Vec<f64> {
    let n_min = counts.iter().copied().filter(|&n| n > 0).min().unwrap_or(1) as f64;
    counts
        .iter()
        .map(|&n| {
            if n == 0 {
                max_margin
            } else {
                max_margin * (n_min / n as f64).powf(0.25)
            }
        })
        .collect()
}

fn weight(weights: Option<&[f64]>, label: usize) -> f64 {
    weights.map_or(1.0, |w| w[label])
}

pub fn wce_loss(probs: &[f64], label: usize, weights: Option<&[f64]>) -> f64 {
    let p = probs[label].clamp(PROB_FLOOR, 1.0);
    -weight(weights, label) * p.ln()
}

pub fn focal_loss(probs: &[f64], label: usize, gamma: f64, weights: Option<&[f64]>) -> f64 {
    let p = probs[label].clamp(PROB_FLOOR, 1.0);
    -weight(weights, label) * (1.0 - p).powf(gamma) * p.ln()
}

pub fn ldam_loss(
    logits: &[f64],
    label: usize,
    counts: &[usize],
    max_margin: f64,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let margins = ldam_margins(counts, max_margin)?;
    let mut z = logits.to_vec();
    z[label] -= margins[label];
    Ok(-weight(weights, label) * log_softmax(&z)[label])
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// A loss bound to concrete class weights and margins.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLoss {
    pub kind: LossKind,
    pub weights: Vec<f64>,
    pub margins: Vec<f64>,
}

impl ResolvedLoss {
    /// Loss of one sample and its gradient with respect to the logits.
    pub fn loss_and_grad(&self, logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        let w = self.weights[label];
        let mut z = logits.to_vec();
        if let LossKind::Ldam { .. } = self.kind {
            z[label] -= self.margins[label];
        }
        let logp = log_softmax(&z);
        let lp = logp[label];
        // dL/dz_j = coef * (p_j - [j == y])
        let (loss, coef) = match self.kind {
            LossKind::Wce | LossKind::Ldam { .. } => (-w * lp, w),
            LossKind::Focal { gamma } => {
                let p = lp.exp();
                let q = 1.0 - p;
                let qg = q.powf(gamma);
                // derivative of -(1-p)^g log p w.r.t. log p, times p
                let extra = if gamma == 0.0 || q <= 0.0 {
                    0.0
                } else {
                    gamma * q.powf(gamma - 1.0) * p * lp
                };
                (-w * qg * lp, w * (qg - extra))
            }
        };
        for (j, g) in grad.iter_mut().enumerate() {
            let pj = logp[j].exp();
            *g = coef * (pj - if j == label { 1.0 } else { 0.0 });
        }
        loss
    }

    pub fn loss(&self, logits: &[f64], label: usize) -> f64 {
        let mut g = vec![0.0; logits.len()];
        self.loss_and_grad(logits, label, &mut g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_examples() {
        assert_eq!(class_weights(&[10, 10, 10]).unwrap(), vec![1.0 / 3.0; 3]);
        let w = class_weights(&[1, 9]).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-12 && (w[1] - 0.1).abs() < 1e-12);
        // 1/6552 : 1/20287 normalised
        let w = class_weights(&[6552, 20287]).unwrap();
        let a = 1.0 / 6552.0;
        let b = 1.0 / 20287.0;
        assert!((w[0] - a / (a + b)).abs() < 1e-12);
        assert!((w[0] - 0.7559).abs() < 5e-5 && (w[1] - 0.2441).abs() < 5e-5);
        assert!(class_weights(&[3, 0]).is_err());
    }

    #[test]
    fn wce_examples() {
        assert_eq!(wce_loss(&[0.0, 1.0], 1, None), 0.0);
        assert!((wce_loss(&[0.5, 0.5], 0, None) - std::f64::consts::LN_2).abs() < 1e-15);
        let p = [0.2, 0.3, 0.5];
        let u = [1.0 / 3.0; 3];
        assert_eq!(wce_loss(&p, 1, Some(&u)), wce_loss(&p, 1, None) / 3.0);
        assert!(wce_loss(&[1.0, 0.0], 1, None).is_finite());
    }

    #[test]
    fn focal_examples() {
        let p = [0.1, 0.9];
        assert_eq!(focal_loss(&p, 1, 0.0, None), wce_loss(&p, 1, None));
        let expect = 0.1f64.powi(5) * -(0.9f64.ln());
        assert!((focal_loss(&p, 1, 5.0, None) - expect).abs() < 1e-18);
        assert!((focal_loss(&p, 1, 5.0, None) - 1.0536e-6).abs() < 1e-10);
        for g in [0.0, 0.5, 2.0, 5.0] {
            assert_eq!(focal_loss(&[0.0, 1.0], 1, g, None), 0.0);
        }
    }

    #[test]
    fn ldam_examples() {
        let m = ldam_margins(&[16, 1], 0.5).unwrap();
        assert!((m[0] - 0.25).abs() < 1e-15 && m[1] == 0.5);
        let z = [0.3, -1.2, 2.0];
        let ce = -log_softmax(&z)[2];
        assert_eq!(ldam_loss(&z, 2, &[5, 6, 7], 0.0, None).unwrap(), ce);
        let eq = ldam_margins(&[4, 4, 4], 0.7).unwrap();
        assert_eq!(eq, vec![0.7; 3]);
        let shifted = [0.3, -1.2, 2.0 - 0.7];
        assert_eq!(
            ldam_loss(&z, 2, &[4, 4, 4], 0.7, None).unwrap(),
            -log_softmax(&shifted)[2]
        );
    }

    #[test]
    fn resolved_gradients_match_finite_differences() {
        let z = [0.4, -0.3, 1.1, 0.05];
        let counts = [50, 5, 20, 9];
        for spec in [
            LossSpec::default(),
            LossSpec::focal(2.0).weighted(),
            LossSpec::focal(0.5),
            LossSpec::ldam(0.5).weighted(),
        ] {
            let r = spec.resolve(&counts).unwrap();
            for label in 0..4 {
                let mut g = [0.0; 4];
                r.loss_and_grad(&z, label, &mut g);
                for j in 0..4 {
                    let h = 1e-6;
                    let mut zp = z;
                    zp[j] += h;
                    let mut zm = z;
                    zm[j] -= h;
                    let fd = (r.loss(&zp, label) - r.loss(&zm, label)) / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-8, "{spec:?} {label} {j}: {fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn resolved_matches_public_losses() {
        let z = [0.2, 1.5, -0.7];
        let p = softmax(&z);
        let counts = [30, 3, 10];
        let w = class_weights(&counts).unwrap();
        let r = LossSpec::focal(5.0).weighted().resolve(&counts).unwrap();
        assert!((r.loss(&z, 1) - focal_loss(&p, 1, 5.0, Some(&w))).abs() < 1e-14);
        let r = LossSpec::ldam(0.5).weighted().resolve(&counts).unwrap();
        assert!((r.loss(&z, 0) - ldam_loss(&z, 0, &counts, 0.5, Some(&w)).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn invalid_specs() {
        assert!(LossSpec::focal(-1.0).validate(2).is_err());
        assert!(LossSpec::ldam(f64::NAN).validate(2).is_err());
        let spec = LossSpec {
            kind: LossKind::Wce,
            weights: ClassWeighting::Explicit(vec![0.0, 0.0]),
        };
        assert!(spec.validate(2).is_err());
    }
}
