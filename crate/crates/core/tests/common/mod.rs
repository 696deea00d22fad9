#![allow(dead_code)]

use pronc::etf::{construct_etf, EtfTarget};
use pronc::linalg::{gram_schmidt_extend, Matrix};
use pronc::losses::LossSpec;
use pronc::metrics::AccuracyMatrix;
use pronc::model::{backward, batch_loss, BatchSample, FeatureModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

pub fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_etf(d: usize, labels: &[usize], rng: &mut ChaCha8Rng) -> EtfTarget {
    let basis = gram_schmidt_extend(&Matrix::zeros(d, 0), labels.len(), rng).unwrap();
    construct_etf(&basis, labels).unwrap()
}

/// Small random model with `k` head rows; biases are randomized too so no
/// parameter sits at an initialization special case.
pub fn random_model(dims: &[usize], k: usize, rng: &mut ChaCha8Rng) -> FeatureModel {
    let mut m = FeatureModel::new(dims, rng).unwrap();
    m.grow_head(k, rng).unwrap();
    for p in m.parameters_mut() {
        *p += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    m
}

/// Gradient by central differences of `batch_loss(..).total`, one parameter
/// at a time.
pub fn finite_difference(
    model: &FeatureModel,
    batch: &[BatchSample<'_>],
    spec: &LossSpec,
    etf: Option<&EtfTarget>,
    prev: Option<&FeatureModel>,
) -> Vec<f64> {
    let n = model.parameter_count();
    let mut out = Vec::with_capacity(n);
    let mut probe = model.clone();
    for i in 0..n {
        let orig = *probe.parameters().nth(i).unwrap();
        *probe.parameters_mut().nth(i).unwrap() = orig + FD_STEP;
        let up = batch_loss(&probe, batch, spec, etf, prev).unwrap().total;
        *probe.parameters_mut().nth(i).unwrap() = orig - FD_STEP;
        let down = batch_loss(&probe, batch, spec, etf, prev).unwrap().total;
        *probe.parameters_mut().nth(i).unwrap() = orig;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

/// `|a - n| / max(|a|, |n|)` over the whole parameter vector (Euclidean norms).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-300)
}

/// Pre-activations closer than this to the leaky-ReLU kink make central
/// differences straddle two linear pieces; such draws are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

fn near_kink(model: &FeatureModel, inputs: &[Vec<f64>]) -> bool {
    inputs.iter().any(|x| {
        let rec = model.forward(x).unwrap();
        rec.pre_activations[..model.layers().len() - 1]
            .iter()
            .flatten()
            .any(|z| z.abs() < KINK_MARGIN)
    })
}

/// Worst relative error over `draws` random (model, batch) pairs for one loss
/// configuration. Each draw uses a fresh model, previous model, ETF and batch.
pub fn gradient_check(spec: &LossSpec, draws: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [5, 7, 6, 6];
    let k = 4;
    let labels: Vec<usize> = (0..k).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < draws {
        let model = random_model(&dims, k, &mut rng);
        let prev = random_model(&dims, k, &mut rng);
        let etf = random_etf(dims[3], &labels, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(dims[0], &mut rng)).collect();
        if near_kink(&model, &inputs) {
            continue;
        }
        checked += 1;
        let batch: Vec<BatchSample<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| BatchSample {
                input: x,
                class: i % k,
                ce_classes: if i == 2 { 2..4 } else { 0..k },
            })
            .collect();
        let (g, _) = backward(&model, &batch, spec, Some(&etf), Some(&prev)).unwrap();
        let analytic: Vec<f64> = g.values().copied().collect();
        let numeric = finite_difference(&model, &batch, spec, Some(&etf), Some(&prev));
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Final average accuracy by explicit loops over the last row.
pub fn faa_oracle(rows: &[Vec<f64>]) -> f64 {
    let last = rows.last().unwrap();
    let mut s = 0.0;
    for v in last {
        s += v;
    }
    s / last.len() as f64
}

/// Forgetting: mean over earlier tasks of best earlier accuracy minus final.
pub fn ff_oracle(rows: &[Vec<f64>]) -> Option<f64> {
    let t = rows.len();
    if t < 2 {
        return None;
    }
    let mut s = 0.0;
    for i in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for row in rows.iter().take(t - 1).skip(i) {
            if row[i] > best {
                best = row[i];
            }
        }
        s += best - rows[t - 1][i];
    }
    Some(s / (t - 1) as f64)
}

pub fn random_accuracy_rows(t: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..t)
        .map(|r| (0..=r).map(|_| rng.random_range(0.0..=1.0)).collect())
        .collect()
}

pub fn accuracy_matrix(rows: &[Vec<f64>]) -> AccuracyMatrix {
    AccuracyMatrix::from_rows(rows.to_vec()).unwrap()
}

/// Big-endian IDX image file bytes.
pub fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for v in [count, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}
