//! Scalar loss terms of the training objective. Gradients live in
//! [`crate::model`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

const UNIT_TOL: f64 = 1e-6;

/// Which logits the cross-entropy term is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CeScope {
    /// Every class seen so far.
    #[default]
    AllSeen,
    /// Only the classes of the task the sample belongs to.
    CurrentTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    /// Alignment weight.
    pub lambda1: f64,
    /// Distillation weight.
    pub lambda2: f64,
    pub ce_scope: CeScope,
    /// Cross-entropy weight; 1 except when the term is ablated.
    #[serde(default = "unit_weight")]
    pub ce_weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(lambda1: f64, lambda2: f64, ce_scope: CeScope) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self {
            lambda1,
            lambda2,
            ce_scope,
            ce_weight: 1.0,
        })
    }

    pub fn ce_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ce_scope: CeScope::AllSeen,
            ce_weight: 1.0,
        }
    }
}

/// Per-component losses of one sample or a batch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub align: f64,
    pub distill: f64,
    pub total: f64,
}

/// `-log softmax(logits)[label]`, stabilized by subtracting the max logit.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(ce_unchecked(logits, label))
}

pub(crate) fn ce_unchecked(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - (logits[label] - max)
}

#[inline]
pub(crate) fn cosine_penalty(a: &[f64], b: &[f64]) -> f64 {
    0.5 * (dot(a, b) - 1.0).powi(2)
}

fn check_unit(which: &'static str, v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitInput { which, norm: n });
    }
    Ok(())
}

/// `1/2 (vertex . mu - 1)^2` for a unit feature and its class vertex.
pub fn align_loss(mu: &[f64], vertex: &[f64]) -> Result<f64> {
    check_unit("feature", mu)?;
    check_unit("vertex", vertex)?;
    Ok(cosine_penalty(vertex, mu))
}

/// `1/2 (mu_prev . mu_curr - 1)^2` between the previous and current model's
/// normalized features for the same sample.
pub fn distill_loss(mu_prev: &[f64], mu_curr: &[f64]) -> Result<f64> {
    check_unit("previous feature", mu_prev)?;
    check_unit("current feature", mu_curr)?;
    Ok(cosine_penalty(mu_prev, mu_curr))
}

pub fn total_loss(ce: f64, align: f64, distill: f64, spec: &LossSpec) -> f64 {
    spec.ce_weight * ce + spec.lambda1 * align + spec.lambda2 * distill
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn ce_uniform_logits() {
        let v = ce_loss(&[0.3; 4], 2).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((v - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn ce_confident() {
        let expected = -(1.0 / (1.0 + (-10f64).exp())).ln();
        let v = ce_loss(&[10.0, 0.0], 0).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn ce_rejects_bad_label() {
        assert!(matches!(
            ce_loss(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn align_values() {
        let v = unit(vec![1.0, 2.0, -0.5]);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(align_loss(&v, &v).unwrap().abs() < 1e-15);
        assert!((align_loss(&neg, &v).unwrap() - 2.0).abs() < 1e-12);
        assert!((align_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            align_loss(&[2.0, 0.0], &[1.0, 0.0]),
            Err(Error::NonUnitInput { which: "feature", .. })
        ));
    }

    #[test]
    fn distill_values() {
        let v = unit(vec![0.2, -0.7]);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(distill_loss(&v, &v).unwrap().abs() < 1e-15);
        assert!((distill_loss(&v, &neg).unwrap() - 2.0).abs() < 1e-12);
        assert!(distill_loss(&[0.5, 0.0], &v).is_err());
    }

    #[test]
    fn total_combination() {
        let spec = LossSpec::new(18.0, 170.0, CeScope::AllSeen).unwrap();
        assert!((total_loss(1.0, 0.5, 0.1, &spec) - 27.0).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 3.0, 9.0, &LossSpec::ce_only()), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &spec), 0.0);
        assert!(LossSpec::new(-1.0, 0.0, CeScope::AllSeen).is_err());
    }

    proptest! {
        #[test]
        fn ce_shift_invariant(logits in proptest::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0, pick: usize) {
            let label = pick % logits.len();
            let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
            let a = ce_loss(&logits, label).unwrap();
            let b = ce_loss(&shifted, label).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn cosine_terms_symmetric_and_bounded(
            a in proptest::collection::vec(-1.0f64..1.0, 3),
            b in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let (a, b) = (unit(a), unit(b));
            let ab = align_loss(&a, &b).unwrap();
            prop_assert!((ab - align_loss(&b, &a).unwrap()).abs() < 1e-15);
            let d = distill_loss(&a, &b).unwrap();
            prop_assert!((d - distill_loss(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
        }

        #[test]
        fn total_monotone(ce in 0.0f64..5.0, al in 0.0f64..2.0, di in 0.0f64..2.0, bump in 0.0f64..1.0) {
            let spec = LossSpec::new(18.0, 170.0, CeScope::AllSeen).unwrap();
            let base = total_loss(ce, al, di, &spec);
            prop_assert!(total_loss(ce + bump, al, di, &spec) >= base);
            prop_assert!(total_loss(ce, al + bump, di, &spec) >= base);
            prop_assert!(total_loss(ce, al, di + bump, &spec) >= base);
        }
    }
}
