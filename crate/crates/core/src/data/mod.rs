//! Datasets, task streams and result files.

mod idx;
mod results;
mod synthetic;

use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub use self::idx::{load_idx_stream, parse_idx_images, parse_idx_labels, IdxError, IdxImages};
pub use self::results::{read_summary, write_results, RunSummary, ACCURACY_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE};
pub use self::synthetic::{gen_synthetic_stream, SyntheticSpec, SPHERE_RADIUS};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.len() != first.len()) {
                return Err(Error::Data("inputs have differing lengths".into()));
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Train and test split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Tasks in arrival order; class sets are pairwise disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for task in &tasks {
            if task.classes.is_empty() {
                return Err(Error::Data("task without classes".into()));
            }
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(Error::ClassOverlap { label: c });
                }
            }
            for l in task.train.labels().iter().chain(task.test.labels()) {
                if !task.classes.contains(l) {
                    return Err(Error::Data(format!("label {l} outside its task's class set")));
                }
            }
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.tasks.iter().find_map(|t| t.train.input_dim())
    }

    pub fn all_classes(&self) -> Vec<usize> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }
}

/// Splits per class: the first `round(0.8 n)` samples (in given order) train,
/// the rest test.
pub(crate) fn split_per_class(
    classes: &[usize],
    per_class: Vec<Vec<Vec<f64>>>,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (&c, samples) in classes.iter().zip(per_class) {
        let n_train = (samples.len() as f64 * 0.8).round() as usize;
        for (i, s) in samples.into_iter().enumerate() {
            let dst = if i < n_train { &mut train } else { &mut test };
            dst.0.push(s);
            dst.1.push(c);
        }
    }
    Ok((
        LabeledDataset::new(train.0, train.1)?,
        LabeledDataset::new(test.0, test.1)?,
    ))
}
