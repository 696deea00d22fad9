mod common;

use common::*;
use pronc::losses::{ce_loss, CeScope, LossSpec};
use pronc::model::{apply_sgd, backward, batch_loss, BatchSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(ce_weight: f64, lambda1: f64, lambda2: f64) -> LossSpec {
    LossSpec {
        lambda1,
        lambda2,
        ce_scope: CeScope::AllSeen,
        ce_weight,
    }
}

#[test]
fn cross_entropy_gradient_matches_central_differences() {
    let err = gradient_check(&spec(1.0, 0.0, 0.0), 20, 1);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn alignment_gradient_matches_central_differences() {
    let err = gradient_check(&spec(0.0, 18.0, 0.0), 20, 2);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn distillation_gradient_matches_central_differences() {
    let err = gradient_check(&spec(0.0, 0.0, 170.0), 20, 3);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn total_gradient_matches_central_differences() {
    let err = gradient_check(&spec(1.0, 18.0, 170.0), 20, 4);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn ce_only_equals_standalone_softmax_gradient() {
    // Head gradient of CE alone is (softmax - onehot) x feature; compare with a
    // direct computation from the forward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = random_model(&[4, 6, 5], 3, &mut rng);
    let x = gaussian_vec(4, &mut rng);
    let batch = [BatchSample {
        input: &x,
        class: 1,
        ce_classes: 0..3,
    }];
    let (g, parts) = backward(&model, &batch, &spec(1.0, 0.0, 0.0), None, None).unwrap();
    let rec = model.forward(&x).unwrap();
    assert!((parts.ce - ce_loss(&rec.logits, 1).unwrap()).abs() < 1e-14);
    let max = rec.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = rec.logits.iter().map(|l| (l - max).exp()).sum();
    for k in 0..3 {
        let p = (rec.logits[k] - max).exp() / z - if k == 1 { 1.0 } else { 0.0 };
        assert!((g.head.bias[k] - p).abs() < 1e-14);
        for j in 0..5 {
            assert!((g.head.weights.get(k, j) - p * rec.raw_feature[j]).abs() < 1e-13);
        }
    }
}

#[test]
fn alignment_and_distillation_vanish_at_their_minimum() {
    // Make the ETF vertex of the sample's class equal its own normalized
    // feature, and use the model itself as the previous model.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = random_model(&[3, 5, 4], 2, &mut rng);
    let x = gaussian_vec(3, &mut rng);
    let mu = model.feature(&x).unwrap();
    let other: Vec<f64> = mu.iter().map(|v| -v).collect();
    let basis = pronc::linalg::gram_schmidt_extend(
        &pronc::linalg::Matrix::from_columns(4, &[&mu]).unwrap(),
        1,
        &mut rng,
    )
    .unwrap();
    let etf = pronc::etf::EtfTarget::from_parts(
        pronc::linalg::Matrix::from_columns(4, &[&mu, &other]).unwrap(),
        basis,
        vec![0, 1],
    )
    .unwrap();
    let batch = [BatchSample {
        input: &x,
        class: 0,
        ce_classes: 0..2,
    }];
    let (g, parts) = backward(&model, &batch, &spec(0.0, 18.0, 170.0), Some(&etf), Some(&model)).unwrap();
    assert!(parts.align.abs() < 1e-20 && parts.distill.abs() < 1e-20);
    assert!(g.values().all(|v| v.abs() < 1e-9), "{:?}", g.values().fold(0.0f64, |m, v| m.max(v.abs())));
}

#[test]
fn small_steps_descend_the_full_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels = [0, 1, 2];
    let mut model = random_model(&[4, 8, 6], 3, &mut rng);
    let prev = random_model(&[4, 8, 6], 3, &mut rng);
    let etf = random_etf(6, &labels, &mut rng);
    let xs: Vec<Vec<f64>> = (0..6).map(|_| gaussian_vec(4, &mut rng)).collect();
    let batch: Vec<BatchSample<'_>> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| BatchSample {
            input: x,
            class: i % 3,
            ce_classes: 0..3,
        })
        .collect();
    let s = spec(1.0, 18.0, 170.0);
    let mut last = batch_loss(&model, &batch, &s, Some(&etf), Some(&prev)).unwrap().total;
    for _ in 0..50 {
        let (g, _) = backward(&model, &batch, &s, Some(&etf), Some(&prev)).unwrap();
        apply_sgd(&mut model, &g, 1e-4).unwrap();
        let now = batch_loss(&model, &batch, &s, Some(&etf), Some(&prev)).unwrap().total;
        assert!(now <= last + 1e-12, "{now} > {last}");
        last = now;
    }
}
