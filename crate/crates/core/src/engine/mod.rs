//! The continual-learning loop.
//!
//! Task 1 is plain supervised training; afterwards the ETF is fitted to the
//! task's normalized class means. Every later task first expands the ETF by
//! one vertex per new class, then trains on current plus replayed data with
//! cross-entropy, alignment to the current ETF, and feature distillation
//! against the model frozen after the previous task. Prediction picks the
//! ETF vertex with the largest cosine to the normalized feature.

mod buffer;
mod config;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::buffer::{ReplayBuffer, ReplaySample};
pub use self::config::{
    Ablation, DatasetSpec, ExperimentConfig, ModelSpec, NcFeatureSource, Scenario,
};

use crate::data::{gen_synthetic_stream, load_idx_stream, LabeledDataset, SyntheticSpec, TaskStream};
use crate::error::{Error, Result};
use crate::etf::{construct_etf, expand_etf, nearest_etf, verify_etf, EtfDiagnostics, EtfTarget};
use crate::linalg::{dot, gram_schmidt_extend, Matrix};
use crate::losses::{CeScope, LossParts, LossSpec};
use crate::metrics::{mean_vector, nc_report, AccuracyMatrix, ClassFeatures, NcReport};
use crate::model::{backward, BatchSample, FeatureModel, ModelSnapshot, Sgd};

/// Tolerance for the per-checkpoint ETF validity check.
pub const ETF_CHECK_TOL: f64 = 1e-6;

/// Per-task record emitted after each task finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub task: usize,
    /// Accuracy on each seen task's test set.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Mean loss over the final epoch.
    pub final_epoch_loss: LossParts,
    pub etf_classes: usize,
    pub etf: EtfDiagnostics,
    /// Earlier basis columns were bit-identical after this task's expansion.
    pub basis_preserved: bool,
    /// Centered means fed to the ETF fit were rank deficient (first task only).
    pub etf_fit_rank_deficient: Option<bool>,
    pub nc: Option<NcReport>,
}

/// Everything the engine carries between tasks.
#[derive(Debug, Clone)]
pub struct Experiment {
    config: ExperimentConfig,
    model: FeatureModel,
    prev_model: Option<ModelSnapshot>,
    etf: Option<EtfTarget>,
    buffer: ReplayBuffer,
    accuracy: AccuracyMatrix,
    rng: ChaCha8Rng,
    /// Classes of each task started so far, in arrival order.
    task_classes: Vec<Vec<usize>>,
    /// Class mean of normalized features recorded right after the class's task.
    retained_means: BTreeMap<usize, Vec<f64>>,
    last_epoch_loss: LossParts,
    last_fit_rank_deficient: Option<bool>,
    last_basis_preserved: bool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut dims = vec![input_dim];
        dims.extend(&config.model.hidden);
        dims.push(config.model.feature_dim);
        let model = FeatureModel::new(&dims, &mut rng)?;
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            accuracy: AccuracyMatrix::new(config.tasks),
            model,
            prev_model: None,
            etf: None,
            rng,
            task_classes: Vec::new(),
            retained_means: BTreeMap::new(),
            last_epoch_loss: LossParts::default(),
            last_fit_rank_deficient: None,
            last_basis_preserved: true,
            config,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &FeatureModel {
        &self.model
    }

    pub fn prev_model(&self) -> Option<&ModelSnapshot> {
        self.prev_model.as_ref()
    }

    pub fn etf(&self) -> Option<&EtfTarget> {
        self.etf.as_ref()
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn accuracy(&self) -> &AccuracyMatrix {
        &self.accuracy
    }

    pub fn tasks_completed(&self) -> usize {
        self.task_classes.len()
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        self.task_classes.iter().flatten().copied().collect()
    }

    pub fn retained_means(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.retained_means
    }

    /// Head row / ETF column of a seen class.
    fn column_of(&self, label: usize) -> Result<usize> {
        self.task_classes
            .iter()
            .flatten()
            .position(|&l| l == label)
            .ok_or(Error::UnknownLabel { label })
    }

    fn task_range(&self, task: usize) -> Range<usize> {
        let start: usize = self.task_classes[..task].iter().map(Vec::len).sum();
        start..start + self.task_classes[task].len()
    }

    fn loss_spec(&self, first_task: bool) -> LossSpec {
        let cfg = &self.config;
        let mut spec = LossSpec {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            ce_scope: cfg.ce_scope,
            ce_weight: 1.0,
        };
        match cfg.ablation {
            Ablation::NoAlign => spec.lambda1 = 0.0,
            Ablation::NoDistill => spec.lambda2 = 0.0,
            Ablation::NoCe if !first_task => spec.ce_weight = 0.0,
            _ => {}
        }
        if first_task {
            spec.lambda2 = 0.0;
            if cfg.ablation != Ablation::PredefinedGlobalEtf {
                spec.lambda1 = 0.0;
            }
        }
        spec
    }

    fn check_new_classes(&self, dataset: &LabeledDataset) -> Result<Vec<usize>> {
        if dataset.is_empty() {
            return Err(Error::Data("task has no training samples".into()));
        }
        let classes = dataset.classes();
        let seen = self.seen_classes();
        if let Some(&c) = classes.iter().find(|c| seen.contains(c)) {
            return Err(Error::ClassOverlap { label: c });
        }
        if let Some(d) = dataset.input_dim() {
            if d != self.model.input_dim() {
                return Err(Error::Shape(format!(
                    "task inputs have dim {d}, model expects {}",
                    self.model.input_dim()
                )));
            }
        }
        Ok(classes)
    }

    /// Supervised first task, then fit the ETF to the normalized class means.
    pub fn train_first_task(&mut self, dataset: &LabeledDataset) -> Result<()> {
        if !self.task_classes.is_empty() {
            return Err(Error::Config("first task already trained".into()));
        }
        if self.config.epochs == 0 {
            return Err(Error::NoTraining);
        }
        let classes = self.check_new_classes(dataset)?;
        let k = classes.len();
        if self.model.feature_dim() < k.max(2) {
            return Err(Error::DimensionBelowClasses {
                dim: self.model.feature_dim(),
                classes: k,
            });
        }
        self.task_classes.push(classes.clone());
        self.model.grow_head(k, &mut self.rng)?;

        if self.config.ablation == Ablation::PredefinedGlobalEtf {
            let all: Vec<usize> = classes
                .iter()
                .copied()
                .chain(self.future_labels(k))
                .collect();
            let basis = gram_schmidt_extend(
                &Matrix::zeros(self.model.feature_dim(), 0),
                all.len(),
                &mut self.rng,
            )?;
            self.etf = Some(construct_etf(&basis, &all)?);
        }

        let spec = self.loss_spec(true);
        let samples = self.current_samples(dataset, 0)?;
        self.fit(&samples, &spec)?;

        self.last_fit_rank_deficient = None;
        match self.config.ablation {
            Ablation::PredefinedGlobalEtf => {}
            Ablation::PredefinedBaseEtf => {
                let basis =
                    gram_schmidt_extend(&Matrix::zeros(self.model.feature_dim(), 0), k, &mut self.rng)?;
                self.etf = Some(construct_etf(&basis, &classes)?);
            }
            _ => {
                let means = self.class_means(dataset, &classes)?;
                let cols: Vec<&Vec<f64>> = classes.iter().map(|c| &means[c]).collect();
                let fit = nearest_etf(&Matrix::from_columns(self.model.feature_dim(), &cols)?, &classes)?;
                self.last_fit_rank_deficient = Some(fit.rank_deficient);
                self.etf = Some(fit.target);
            }
        }
        self.last_basis_preserved = true;
        self.finish_task(dataset, &classes, 0)
    }

    /// Placeholder labels for classes of future tasks, used only by the
    /// global-ETF ablation before the stream reveals them. Future tasks are
    /// assumed to follow consecutively after the largest first-task label.
    fn future_labels(&self, first_k: usize) -> Vec<usize> {
        let total = self.config.tasks * self.config.classes_per_task;
        let start = self.task_classes[0].iter().max().map_or(0, |m| m + 1);
        (start..start + total.saturating_sub(first_k)).collect()
    }

    /// Expands the ETF, grows the head and trains on current plus replayed data.
    pub fn train_task(&mut self, dataset: &LabeledDataset, task_id: usize) -> Result<()> {
        let prev_etf = self.etf.clone().ok_or(Error::MissingEtf)?;
        if self.prev_model.is_none() {
            return Err(Error::MissingPrevModel);
        }
        if task_id != self.task_classes.len() {
            return Err(Error::UnknownTask { task: task_id });
        }
        let classes = self.check_new_classes(dataset)?;
        let m = classes.len();

        if self.config.ablation == Ablation::PredefinedGlobalEtf {
            for &c in &classes {
                prev_etf.column_of(c)?;
            }
            self.last_basis_preserved = true;
        } else {
            let expanded = expand_etf(&prev_etf, &classes, &mut self.rng)?;
            let old = prev_etf.basis();
            let new = expanded.basis();
            self.last_basis_preserved = (0..old.rows()).all(|i| {
                (0..old.cols()).all(|j| old.get(i, j).to_bits() == new.get(i, j).to_bits())
            });
            self.etf = Some(expanded);
        }
        self.task_classes.push(classes.clone());
        self.model.grow_head(m, &mut self.rng)?;

        let mut samples = self.current_samples(dataset, task_id)?;
        samples.extend(self.replay_samples()?);
        let spec = self.loss_spec(false);
        self.fit(&samples, &spec)?;
        self.last_fit_rank_deficient = None;
        self.finish_task(dataset, &classes, task_id)
    }

    fn current_samples(&self, dataset: &LabeledDataset, task: usize) -> Result<Vec<OwnedSample>> {
        dataset
            .iter()
            .map(|(x, label)| {
                Ok(OwnedSample {
                    input: x.to_vec(),
                    column: self.column_of(label)?,
                    task,
                })
            })
            .collect()
    }

    fn replay_samples(&self) -> Result<Vec<OwnedSample>> {
        self.buffer
            .samples()
            .iter()
            .map(|s| {
                Ok(OwnedSample {
                    input: s.input.clone(),
                    column: self.column_of(s.label)?,
                    task: s.task,
                })
            })
            .collect()
    }

    fn fit(&mut self, samples: &[OwnedSample], spec: &LossSpec) -> Result<()> {
        let cfg = &self.config;
        let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        let k_seen = self.model.num_classes();
        let ranges: Vec<Range<usize>> = (0..self.task_classes.len()).map(|t| self.task_range(t)).collect();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let prev = self.prev_model.clone();
        let etf = self.etf.clone();
        let mut epoch_loss = LossParts::default();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut self.rng);
            epoch_loss = LossParts::default();
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<BatchSample<'_>> = chunk
                    .iter()
                    .map(|&i| {
                        let s = &samples[i];
                        BatchSample {
                            input: &s.input,
                            class: s.column,
                            ce_classes: match spec.ce_scope {
                                CeScope::AllSeen => 0..k_seen,
                                CeScope::CurrentTask => ranges[s.task].clone(),
                            },
                        }
                    })
                    .collect();
                let (grads, parts) = backward(
                    &self.model,
                    &batch,
                    spec,
                    etf.as_ref(),
                    prev.as_deref(),
                )?;
                opt.step(&mut self.model, &grads)?;
                let w = batch.len() as f64 / samples.len() as f64;
                epoch_loss.ce += w * parts.ce;
                epoch_loss.align += w * parts.align;
                epoch_loss.distill += w * parts.distill;
                epoch_loss.total += w * parts.total;
            }
        }
        self.last_epoch_loss = epoch_loss;
        Ok(())
    }

    /// Mean normalized feature of each class in `dataset`.
    fn class_means(&self, dataset: &LabeledDataset, classes: &[usize]) -> Result<BTreeMap<usize, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for &c in classes {
            let feats = dataset
                .iter()
                .filter(|(_, l)| *l == c)
                .map(|(x, _)| self.model.feature(x))
                .collect::<Result<Vec<_>>>()?;
            let mean = mean_vector(&feats).ok_or(Error::EmptyClass { label: c })?;
            out.insert(c, mean);
        }
        Ok(out)
    }

    fn finish_task(&mut self, dataset: &LabeledDataset, classes: &[usize], task: usize) -> Result<()> {
        for (c, mean) in self.class_means(dataset, classes)? {
            self.retained_means.insert(c, mean);
        }
        self.prev_model = Some(self.model.snapshot());
        for (x, label) in dataset.iter() {
            self.buffer.insert(
                ReplaySample {
                    input: x.to_vec(),
                    label,
                    task,
                },
                &mut self.rng,
            );
        }
        Ok(())
    }

    /// Predicted class label. `task` restricts candidates to that task's
    /// classes (task-incremental evaluation); ties go to the smallest label.
    pub fn predict(&self, x: &[f64], task: Option<usize>) -> Result<usize> {
        let etf = self.etf.as_ref().ok_or(Error::MissingEtf)?;
        let candidates = match task {
            Some(t) if t < self.task_classes.len() => self.task_range(t),
            Some(t) => return Err(Error::UnknownTask { task: t }),
            None => 0..self.task_classes.iter().map(Vec::len).sum(),
        };
        let rec = self.model.forward(x)?;
        let labels = self.seen_classes();
        let candidates = &labels[candidates];
        if self.config.ablation == Ablation::LinearClassifierInference {
            let offset = self.column_of(candidates[0])?;
            let scored = candidates
                .iter()
                .enumerate()
                .map(|(i, &l)| (rec.logits[offset + i], l));
            return argmax_label(scored).ok_or(Error::MissingEtf);
        }
        nearest_vertex(etf, &rec.normalized_feature, candidates)
    }

    /// Fraction of `test` predicted correctly, under the configured scenario.
    pub fn evaluate(&self, test: &LabeledDataset, task: usize) -> Result<f64> {
        if test.is_empty() {
            return Ok(0.0);
        }
        let restrict = match self.config.scenario {
            Scenario::ClassIl => None,
            Scenario::TaskIl => Some(task),
        };
        let mut correct = 0usize;
        for (x, label) in test.iter() {
            if self.predict(x, restrict)? == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / test.len() as f64)
    }

    /// Neural-collapse report over the given datasets (normalized features of
    /// the current model). `None` with fewer than two seen classes.
    pub fn nc_snapshot(&self, datasets: &[&LabeledDataset]) -> Result<Option<NcReport>> {
        let etf = self.etf.as_ref().ok_or(Error::MissingEtf)?;
        if self.seen_classes().len() < 2 {
            return Ok(None);
        }
        diagnose_model(&self.model, etf, &self.task_classes, datasets, &self.retained_means).map(Some)
    }

    fn checkpoint(&mut self, stream: &TaskStream, task: usize) -> Result<CheckpointRecord> {
        let mut accuracies = Vec::with_capacity(task + 1);
        for (i, t) in stream.tasks()[..=task].iter().enumerate() {
            accuracies.push(self.evaluate(&t.test, i)?);
        }
        self.accuracy.set_row(task, &accuracies)?;
        let etf = self.etf.as_ref().ok_or(Error::MissingEtf)?;
        let nc = match self.config.nc_feature_source {
            NcFeatureSource::TaskData => {
                let sets: Vec<&LabeledDataset> = stream.tasks()[..=task].iter().map(|t| &t.train).collect();
                self.nc_snapshot(&sets)?
            }
            NcFeatureSource::ReplayMixed => {
                let replay = LabeledDataset::new(
                    self.buffer.samples().iter().map(|s| s.input.clone()).collect(),
                    self.buffer.samples().iter().map(|s| s.label).collect(),
                )?;
                match self.nc_snapshot(&[&stream.tasks()[task].train, &replay]) {
                    Err(Error::EmptyClass { .. }) => None,
                    other => other?,
                }
            }
        };
        Ok(CheckpointRecord {
            task,
            mean_accuracy: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
            accuracies,
            final_epoch_loss: self.last_epoch_loss,
            etf_classes: etf.num_classes(),
            etf: verify_etf(etf, ETF_CHECK_TOL),
            basis_preserved: self.last_basis_preserved,
            etf_fit_rank_deficient: self.last_fit_rank_deficient,
            nc,
        })
    }
}

#[derive(Debug, Clone)]
struct OwnedSample {
    input: Vec<f64>,
    column: usize,
    task: usize,
}

/// Output of a full run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub accuracy: AccuracyMatrix,
    pub checkpoints: Vec<CheckpointRecord>,
    /// ETF target after each task.
    pub etf_history: Vec<EtfTarget>,
    pub experiment: Experiment,
}

/// Builds the task stream a config describes.
pub fn build_stream(config: &ExperimentConfig) -> Result<TaskStream> {
    match &config.dataset {
        DatasetSpec::Synthetic {
            samples_per_class,
            input_dim,
            cluster_std,
            seed,
        } => gen_synthetic_stream(&SyntheticSpec {
            tasks: config.tasks,
            classes_per_task: config.classes_per_task,
            samples_per_class: *samples_per_class,
            input_dim: *input_dim,
            cluster_std: *cluster_std,
            seed: seed.unwrap_or(config.seed),
        }),
        DatasetSpec::Idx { images, labels } => {
            load_idx_stream(images, labels, config.tasks, config.classes_per_task)
        }
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let stream = build_stream(config)?;
    run_on_stream(config, &stream)
}

pub fn run_on_stream(config: &ExperimentConfig, stream: &TaskStream) -> Result<RunOutput> {
    if stream.len() != config.tasks {
        return Err(Error::Config(format!(
            "config expects {} tasks, stream has {}",
            config.tasks,
            stream.len()
        )));
    }
    let input_dim = stream
        .input_dim()
        .ok_or_else(|| Error::Data("stream has no samples".into()))?;
    let mut exp = Experiment::new(config.clone(), input_dim)?;
    let mut checkpoints = Vec::with_capacity(stream.len());
    let mut etf_history = Vec::with_capacity(stream.len());
    for (t, task) in stream.tasks().iter().enumerate() {
        if t == 0 {
            exp.train_first_task(&task.train)?;
        } else {
            exp.train_task(&task.train, t)?;
        }
        checkpoints.push(exp.checkpoint(stream, t)?);
        etf_history.push(exp.etf().cloned().ok_or(Error::MissingEtf)?);
    }
    Ok(RunOutput {
        accuracy: exp.accuracy.clone(),
        checkpoints,
        etf_history,
        experiment: exp,
    })
}

/// Neural-collapse report of `model` against `etf`. `task_classes` lists the
/// classes of each task in arrival order, which is also the head row order;
/// features are pooled from `datasets` by label.
pub fn diagnose_model(
    model: &FeatureModel,
    etf: &EtfTarget,
    task_classes: &[Vec<usize>],
    datasets: &[&LabeledDataset],
    retained_means: &BTreeMap<usize, Vec<f64>>,
) -> Result<NcReport> {
    if model.feature_dim() != etf.dim() {
        return Err(Error::Shape(format!(
            "checkpoint feature dim {} but ETF dim {}",
            model.feature_dim(),
            etf.dim()
        )));
    }
    let mut features: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for ds in datasets {
        for (x, l) in ds.iter() {
            features.entry(l).or_default().push(model.feature(x)?);
        }
    }
    let head = model.head();
    let mut classes = Vec::new();
    for (task, labels) in task_classes.iter().enumerate() {
        for &label in labels {
            let row = classes.len();
            classes.push(ClassFeatures {
                label,
                task,
                features: features.remove(&label).unwrap_or_default(),
                vertex: etf.vertex_of(label)?,
                head_row: (row < head.weights.rows()).then(|| head.weights.row(row).to_vec()),
                retained_mean: retained_means.get(&label).cloned(),
            });
        }
    }
    nc_report(&classes)
}

/// Label with the largest score; ties go to the smallest label.
pub fn argmax_label(scored: impl IntoIterator<Item = (f64, usize)>) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (score, label) in scored {
        best = match best {
            Some((s, l)) if s > score || (s == score && l < label) => Some((s, l)),
            _ => Some((score, label)),
        };
    }
    best.map(|(_, l)| l)
}

/// Candidate label whose ETF vertex has the largest inner product with the
/// unit feature.
pub fn nearest_vertex(etf: &EtfTarget, feature: &[f64], candidates: &[usize]) -> Result<usize> {
    let scored = candidates
        .iter()
        .map(|&l| Ok((dot(&etf.vertex_of(l)?, feature), l)))
        .collect::<Result<Vec<_>>>()?;
    argmax_label(scored).ok_or(Error::MissingEtf)
}
