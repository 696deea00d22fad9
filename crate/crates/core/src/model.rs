//! Fully connected feature extractor with a growing linear head.
//!
//! Hidden layers use a leaky rectifier; the last layer is linear and its
//! output is the raw feature. The normalized feature `raw / (|raw| + eps)` is
//! what the alignment and distillation terms see, while the head reads the
//! raw feature.

use std::fs;
use std::ops::{Deref, Range};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::EtfTarget;
use crate::linalg::{dot, matrix_from_csv, matrix_to_csv, Matrix};
use crate::losses::{ce_unchecked, cosine_penalty, total_loss, LossParts, LossSpec};

pub const LEAKY_SLOPE: f64 = 0.01;
/// Smoothing added to the feature norm before dividing.
pub const NORM_EPS: f64 = 1e-12;
pub const HEAD_INIT_STD: f64 = 0.01;
pub const ACTIVATION_NAME: &str = "leaky_relu_0.01";

#[inline]
fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
fn leaky_slope(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Affine map `weights * x + bias` with `weights` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|i| dot(self.weights.row(i), x) + self.bias[i])
            .collect()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureModel {
    layers: Vec<Dense>,
    head: Dense,
}

/// Gradient with the same layout as [`FeatureModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    pub head: Dense,
}

#[derive(Debug, Clone)]
pub struct ForwardRecord {
    /// Input to each layer; `activations[0]` is the sample itself.
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub raw_feature: Vec<f64>,
    pub raw_norm: f64,
    pub normalized_feature: Vec<f64>,
    pub logits: Vec<f64>,
}

/// One training example as seen by [`backward`].
#[derive(Debug, Clone)]
pub struct BatchSample<'a> {
    pub input: &'a [f64],
    /// Head row and ETF column of the sample's class.
    pub class: usize,
    /// Head rows the cross-entropy softmax runs over; must contain `class`.
    pub ce_classes: Range<usize>,
}

impl FeatureModel {
    /// He-initialized MLP over `layer_dims = [d_in, hidden.., d]` with an empty head.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer_dims must list at least input and feature sizes, all positive: {layer_dims:?}"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1])
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Dense {
                    weights: Matrix::from_vec_unchecked(w[1], w[0], data),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        let d = *layer_dims.last().expect("checked length");
        Ok(Self {
            layers,
            head: Dense::zeros(0, d),
        })
    }

    pub fn from_parts(layers: Vec<Dense>, head: Dense) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.rows() {
                return Err(Error::Shape(format!("layer {i} bias length")));
            }
            if i > 0 && l.weights.cols() != layers[i - 1].weights.rows() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs, previous layer emits {}",
                    l.weights.cols(),
                    layers[i - 1].weights.rows()
                )));
            }
        }
        let d = layers.last().expect("non-empty").weights.rows();
        if head.weights.cols() != d || head.bias.len() != head.weights.rows() {
            return Err(Error::Shape(format!(
                "head {} incompatible with feature dim {d}",
                head.weights.shape()
            )));
        }
        Ok(Self { layers, head })
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weights.cols()];
        dims.extend(self.layers.iter().map(|l| l.weights.rows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.weights.cols()
    }

    /// Number of classes the head currently scores.
    pub fn num_classes(&self) -> usize {
        self.head.weights.rows()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardRecord> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLayer { layer: 0 });
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&current);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: i + 1 });
            }
            let next = if i == last {
                z.clone()
            } else {
                z.iter().map(|&v| leaky(v)).collect()
            };
            activations.push(current);
            pre_activations.push(z);
            current = next;
        }
        let raw_feature = current;
        let raw_norm = dot(&raw_feature, &raw_feature).sqrt();
        let normalized_feature = raw_feature.iter().map(|v| v / (raw_norm + NORM_EPS)).collect();
        let logits = self.head.apply(&raw_feature);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLayer {
                layer: self.layers.len() + 1,
            });
        }
        Ok(ForwardRecord {
            activations,
            pre_activations,
            raw_feature,
            raw_norm,
            normalized_feature,
            logits,
        })
    }

    /// Normalized last-layer feature.
    pub fn feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.normalized_feature)
    }

    /// Appends `new_class_count` prototype rows drawn from N(0, 0.01^2).
    pub fn grow_head<R: Rng + ?Sized>(&mut self, new_class_count: usize, rng: &mut R) -> Result<()> {
        if new_class_count == 0 {
            return Err(Error::Shape("head growth must add at least one class".into()));
        }
        let d = self.feature_dim();
        let k = self.num_classes();
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
        let mut data = self.head.weights.as_slice().to_vec();
        data.extend((0..new_class_count * d).map(|_| normal.sample(rng)));
        self.head.weights = Matrix::from_vec_unchecked(k + new_class_count, d, data);
        self.head.bias.extend(std::iter::repeat_n(0.0, new_class_count));
        Ok(())
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot(Arc::new(self.clone()))
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            head: Dense::zeros(self.head.weights.rows(), self.head.weights.cols()),
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(Dense::values)
            .chain(self.head.values())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(Dense::values_mut)
            .chain(self.head.values_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().count()
    }

    fn check_finite(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.values().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: i + 1 });
            }
        }
        if self.head.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLayer {
                layer: self.layers.len() + 1,
            });
        }
        Ok(())
    }
}

impl Gradients {
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(Dense::values)
            .chain(self.head.values())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(Dense::values_mut)
            .chain(self.head.values_mut())
    }

    fn shape_matches(&self, model: &FeatureModel) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(g, l)| g.weights.shape() == l.weights.shape())
            && self.head.weights.shape() == model.head.weights.shape()
    }
}

/// Frozen copy of a model. Cloning shares the same parameters.
#[derive(Debug, Clone)]
pub struct ModelSnapshot(Arc<FeatureModel>);

impl ModelSnapshot {
    pub fn snapshot(&self) -> ModelSnapshot {
        self.clone()
    }

    /// Mutable copy of the frozen parameters.
    pub fn to_model(&self) -> FeatureModel {
        (*self.0).clone()
    }
}

impl Deref for ModelSnapshot {
    type Target = FeatureModel;

    fn deref(&self) -> &FeatureModel {
        &self.0
    }
}

impl PartialEq for ModelSnapshot {
    fn eq(&self, other: &Self) -> bool {
        *self.0 == *other.0
    }
}

fn validate_batch(
    model: &FeatureModel,
    batch: &[BatchSample<'_>],
    spec: &LossSpec,
    etf: Option<&EtfTarget>,
    prev: Option<&FeatureModel>,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if spec.lambda2 > 0.0 {
        match prev {
            None => return Err(Error::MissingPrevModel),
            Some(p) if p.feature_dim() != model.feature_dim() => {
                return Err(Error::Shape("previous model has a different feature dim".into()))
            }
            Some(_) => {}
        }
    }
    if spec.lambda1 > 0.0 {
        let etf = etf.ok_or(Error::MissingEtf)?;
        if etf.dim() != model.feature_dim() {
            return Err(Error::Shape(format!(
                "ETF dim {} vs feature dim {}",
                etf.dim(),
                model.feature_dim()
            )));
        }
    }
    let k = model.num_classes();
    for s in batch {
        if s.class >= k || s.ce_classes.end > k || !s.ce_classes.contains(&s.class) {
            return Err(Error::LabelOutOfRange {
                label: s.class,
                classes: k,
            });
        }
        if let Some(e) = etf {
            if spec.lambda1 > 0.0 && s.class >= e.num_classes() {
                return Err(Error::UnknownLabel { label: s.class });
            }
        }
    }
    Ok(())
}

/// Batch-mean objective `ce + lambda1 * align + lambda2 * distill`, evaluated
/// straight from forward passes.
pub fn batch_loss(
    model: &FeatureModel,
    batch: &[BatchSample<'_>],
    spec: &LossSpec,
    etf: Option<&EtfTarget>,
    prev: Option<&FeatureModel>,
) -> Result<LossParts> {
    validate_batch(model, batch, spec, etf, prev)?;
    let mut parts = LossParts::default();
    for s in batch {
        let rec = model.forward(s.input)?;
        let ce = ce_unchecked(&rec.logits[s.ce_classes.clone()], s.class - s.ce_classes.start);
        let align = match etf {
            Some(e) if spec.lambda1 > 0.0 => cosine_penalty(&e.vertex(s.class), &rec.normalized_feature),
            _ => 0.0,
        };
        let distill = match prev {
            Some(p) if spec.lambda2 > 0.0 => {
                cosine_penalty(&p.forward(s.input)?.normalized_feature, &rec.normalized_feature)
            }
            _ => 0.0,
        };
        parts.ce += ce;
        parts.align += align;
        parts.distill += distill;
        parts.total += total_loss(ce, align, distill, spec);
    }
    let n = batch.len() as f64;
    parts.ce /= n;
    parts.align /= n;
    parts.distill /= n;
    parts.total /= n;
    Ok(parts)
}

/// Exact gradient of the batch-mean objective with respect to every
/// parameter of `model`. `prev` is treated as a constant.
pub fn backward(
    model: &FeatureModel,
    batch: &[BatchSample<'_>],
    spec: &LossSpec,
    etf: Option<&EtfTarget>,
    prev: Option<&FeatureModel>,
) -> Result<(Gradients, LossParts)> {
    validate_batch(model, batch, spec, etf, prev)?;
    let mut grads = model.zero_gradients();
    let mut parts = LossParts::default();
    let scale = 1.0 / batch.len() as f64;
    let d = model.feature_dim();
    let vertices = match etf {
        Some(e) if spec.lambda1 > 0.0 => Some(e.vertices()),
        _ => None,
    };

    for s in batch {
        let rec = model.forward(s.input)?;
        let mu = &rec.normalized_feature;

        // Cross-entropy over the sample's logit window.
        let window = s.ce_classes.clone();
        let logits = &rec.logits[window.clone()];
        let target = s.class - window.start;
        let ce = ce_unchecked(logits, target);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let mut g_raw = vec![0.0; d];
        for (offset, e) in exps.iter().enumerate() {
            let row = window.start + offset;
            let g = scale * spec.ce_weight * (e / denom - if offset == target { 1.0 } else { 0.0 });
            grads.head.bias[row] += g;
            let w = model.head.weights.row(row);
            let gw = grads.head.weights.row_mut(row);
            for j in 0..d {
                gw[j] += g * rec.raw_feature[j];
                g_raw[j] += g * w[j];
            }
        }

        // Gradient with respect to the normalized feature.
        let mut g_mu = vec![0.0; d];
        let mut align = 0.0;
        if let Some(v) = vertices {
            let vertex = v.column(s.class);
            let c = dot(&vertex, mu);
            align = 0.5 * (c - 1.0).powi(2);
            let coef = scale * spec.lambda1 * (c - 1.0);
            g_mu.iter_mut().zip(&vertex).for_each(|(g, e)| *g += coef * e);
        }
        let mut distill = 0.0;
        if let Some(p) = prev.filter(|_| spec.lambda2 > 0.0) {
            let mu_prev = p.forward(s.input)?.normalized_feature;
            let c = dot(&mu_prev, mu);
            distill = 0.5 * (c - 1.0).powi(2);
            let coef = scale * spec.lambda2 * (c - 1.0);
            g_mu.iter_mut().zip(&mu_prev).for_each(|(g, e)| *g += coef * e);
        }

        // Through mu = r / (|r| + eps).
        let n = rec.raw_norm;
        let denom = n + NORM_EPS;
        let radial = if n > 0.0 {
            dot(&rec.raw_feature, &g_mu) / (n * denom * denom)
        } else {
            0.0
        };
        for j in 0..d {
            g_raw[j] += g_mu[j] / denom - radial * rec.raw_feature[j];
        }

        // Backpropagate through the stack; the last layer is linear.
        let mut delta = g_raw;
        for li in (0..model.layers.len()).rev() {
            let layer = &model.layers[li];
            let input = &rec.activations[li];
            let g = &mut grads.layers[li];
            for (i, di) in delta.iter().enumerate() {
                g.bias[i] += di;
                let row = g.weights.row_mut(i);
                for (w, a) in row.iter_mut().zip(input) {
                    *w += di * a;
                }
            }
            if li > 0 {
                let prev_z = &rec.pre_activations[li - 1];
                let mut next = vec![0.0; layer.weights.cols()];
                for (i, di) in delta.iter().enumerate() {
                    for (n, w) in next.iter_mut().zip(layer.weights.row(i)) {
                        *n += di * w;
                    }
                }
                for (n, z) in next.iter_mut().zip(prev_z) {
                    *n *= leaky_slope(*z);
                }
                delta = next;
            }
        }

        parts.ce += scale * ce;
        parts.align += scale * align;
        parts.distill += scale * distill;
        parts.total += scale * total_loss(ce, align, distill, spec);
    }
    Ok((grads, parts))
}

/// Plain gradient step `theta <- theta - lr * g`.
pub fn apply_sgd(model: &mut FeatureModel, grads: &Gradients, learning_rate: f64) -> Result<()> {
    Sgd::new(learning_rate, 0.0, 0.0).step(model, grads)
}

/// SGD with optional heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut FeatureModel, grads: &Gradients) -> Result<()> {
        if !grads.shape_matches(model) {
            return Err(Error::Shape("gradient layout does not match model".into()));
        }
        if self.learning_rate == 0.0 {
            return Ok(());
        }
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        if self.momentum == 0.0 {
            for (p, g) in model.parameters_mut().zip(grads.values()) {
                *p -= lr * (g + wd * *p);
            }
        } else {
            let velocity = match &mut self.velocity {
                Some(v) if v.shape_matches(model) => v,
                slot => slot.insert(model.zero_gradients()),
            };
            let mu = self.momentum;
            for ((p, g), v) in model
                .parameters_mut()
                .zip(grads.values())
                .zip(velocity.values_mut())
            {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        model.check_finite()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    layer_dims: Vec<usize>,
    activation: String,
    k_seen: usize,
}

fn row_matrix(v: &[f64]) -> Matrix {
    Matrix::from_vec_unchecked(1, v.len(), v.to_vec())
}

impl FeatureModel {
    /// Writes `header.json` plus one CSV per weight block into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = CheckpointHeader {
            layer_dims: self.layer_dims(),
            activation: ACTIVATION_NAME.into(),
            k_seen: self.num_classes(),
        };
        let hp = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&hp, e))?;
        fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
        let mut blocks: Vec<(String, Matrix)> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            blocks.push((format!("layer{i}_weights.csv"), l.weights.clone()));
            blocks.push((format!("layer{i}_bias.csv"), row_matrix(&l.bias)));
        }
        if self.num_classes() > 0 {
            blocks.push(("head_weights.csv".into(), self.head.weights.clone()));
            blocks.push(("head_bias.csv".into(), row_matrix(&self.head.bias)));
        }
        for (name, m) in blocks {
            let p = dir.join(name);
            fs::write(&p, matrix_to_csv(&m)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let hp = dir.join("header.json");
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::json(&hp, e))?;
        if header.activation != ACTIVATION_NAME {
            return Err(Error::Shape(format!("unsupported activation {}", header.activation)));
        }
        let read = |name: String| -> Result<Matrix> {
            let p = dir.join(&name);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok(matrix_from_csv(&text)?)
        };
        let mut layers = Vec::new();
        for (i, w) in header.layer_dims.windows(2).enumerate() {
            let weights = read(format!("layer{i}_weights.csv"))?;
            let bias = read(format!("layer{i}_bias.csv"))?.as_slice().to_vec();
            if weights.rows() != w[1] || weights.cols() != w[0] {
                return Err(Error::Shape(format!(
                    "layer {i} weights are {}, header says {}x{}",
                    weights.shape(),
                    w[1],
                    w[0]
                )));
            }
            layers.push(Dense { weights, bias });
        }
        let d = *header.layer_dims.last().ok_or_else(|| Error::Shape("empty layer_dims".into()))?;
        let head = if header.k_seen > 0 {
            Dense {
                weights: read("head_weights.csv".into())?,
                bias: read("head_bias.csv".into())?.as_slice().to_vec(),
            }
        } else {
            Dense::zeros(0, d)
        };
        if head.weights.rows() != header.k_seen {
            return Err(Error::Shape("head rows disagree with k_seen".into()));
        }
        Self::from_parts(layers, head)
    }
}
