//! Continual-learning scores and neural-collapse diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Lower-triangular matrix of accuracies: entry `(t, i)` is the accuracy on
/// task `i` after training through task `t`, defined for `i <= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: (0..tasks).map(|t| vec![None; t + 1]).collect(),
        }
    }

    /// Builds a complete matrix from rows of length `1, 2, ..., T`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (t, row) in rows.into_iter().enumerate() {
            m.set_row(t, &row)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, after_task: usize, task: usize, accuracy: f64) -> Result<()> {
        if task > after_task || after_task >= self.rows.len() {
            return Err(Error::Shape(format!(
                "entry ({after_task}, {task}) outside the lower triangle of {} tasks",
                self.rows.len()
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Shape(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.rows[after_task][task] = Some(accuracy);
        Ok(())
    }

    pub fn set_row(&mut self, after_task: usize, values: &[f64]) -> Result<()> {
        if values.len() != after_task + 1 {
            return Err(Error::Shape(format!(
                "row {after_task} needs {} values, got {}",
                after_task + 1,
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            self.set(after_task, i, *v)?;
        }
        Ok(())
    }

    pub fn get(&self, after_task: usize, task: usize) -> Option<f64> {
        self.rows.get(after_task)?.get(task).copied().flatten()
    }

    pub fn row(&self, after_task: usize) -> &[Option<f64>] {
        &self.rows[after_task]
    }

    fn complete_row(&self, t: usize) -> Result<Vec<f64>> {
        self.rows[t]
            .iter()
            .map(|v| v.ok_or(Error::IncompleteRow { row: t }))
            .collect()
    }
}

/// Mean accuracy over all tasks after the last one.
pub fn faa(acc: &AccuracyMatrix) -> Result<f64> {
    let t = acc.tasks();
    if t == 0 {
        return Err(Error::IncompleteRow { row: 0 });
    }
    let last = acc.complete_row(t - 1)?;
    Ok(last.iter().sum::<f64>() / t as f64)
}

/// Average drop from each earlier task's best post-task accuracy to its final
/// accuracy. `None` for a single task. Negative values (backward transfer)
/// are kept as is.
pub fn ff(acc: &AccuracyMatrix) -> Result<Option<f64>> {
    let t = acc.tasks();
    if t < 2 {
        return Ok(None);
    }
    let last = acc.complete_row(t - 1)?;
    let mut total = 0.0;
    for (i, final_acc) in last.iter().enumerate().take(t - 1) {
        let mut best = f64::NEG_INFINITY;
        for after in i..t - 1 {
            let v = acc.get(after, i).ok_or(Error::IncompleteRow { row: after })?;
            best = best.max(v);
        }
        total += best - final_acc;
    }
    Ok(Some(total / (t - 1) as f64))
}

/// Trace of the within-class covariance (population convention).
pub fn nc1_variability(samples: &[Vec<f64>]) -> Result<f64> {
    let mean = mean_vector(samples).ok_or(Error::EmptyClass { label: 0 })?;
    let n = samples.len() as f64;
    Ok(samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n)
}

pub fn mean_vector(samples: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = samples.first()?;
    let mut mean = vec![0.0; first.len()];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x);
    }
    let n = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Some(mean)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        (dot(a, b) / d).clamp(-1.0, 1.0)
    }
}

/// Features of one class plus the reference vectors the report compares against.
#[derive(Debug, Clone)]
pub struct ClassFeatures {
    pub label: usize,
    pub task: usize,
    /// Normalized last-layer features of the class's samples.
    pub features: Vec<Vec<f64>>,
    /// ETF vertex of the class.
    pub vertex: Vec<f64>,
    /// Linear-head prototype row, when a head exists.
    pub head_row: Option<Vec<f64>>,
    /// Class mean recorded right after the class's own task finished.
    pub retained_mean: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    pub labels: Vec<usize>,
    /// Trace of the within-class covariance per class.
    pub nc1_trace: Vec<f64>,
    /// Mean over class pairs of `cos(centered mean k, centered mean k') + 1/(K-1)`.
    pub mean_centered_cosine_gap: f64,
    /// Mean over tasks of the std of within-task pairwise centered cosines.
    pub within_task_cosine_std: f64,
    /// Mean over classes of cos(retained mean, current mean); classes without
    /// a retained mean are skipped. `None` if no class has one.
    pub retention_cosine: Option<f64>,
    /// Mean cos(centered mean k, vertex k') over ordered pairs of distinct classes.
    pub prototype_cosine_global: f64,
    /// Same, restricted to pairs within one task and averaged over tasks.
    pub prototype_cosine_within_task: Option<f64>,
    pub head_prototype_cosine_global: Option<f64>,
    pub head_prototype_cosine_within_task: Option<f64>,
    /// Mean of the class means.
    pub global_mean: Vec<f64>,
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Averages `f(k, k')` over ordered pairs of distinct classes, globally and
/// within tasks (within-task value averaged over tasks having a pair).
fn pair_cosines(
    classes: &[ClassFeatures],
    centered: &[Vec<f64>],
    protos: &[Vec<f64>],
) -> (f64, Option<f64>) {
    let k = classes.len();
    let mut global = 0.0;
    let mut count = 0usize;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                global += cosine(&centered[a], &protos[b]);
                count += 1;
            }
        }
    }
    let mut tasks: Vec<usize> = classes.iter().map(|c| c.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mut per_task = Vec::new();
    for t in tasks {
        let members: Vec<usize> = (0..k).filter(|&i| classes[i].task == t).collect();
        let mut s = 0.0;
        let mut c = 0usize;
        for &a in &members {
            for &b in &members {
                if a != b {
                    s += cosine(&centered[a], &protos[b]);
                    c += 1;
                }
            }
        }
        if c > 0 {
            per_task.push(s / c as f64);
        }
    }
    let within = if per_task.is_empty() {
        None
    } else {
        Some(per_task.iter().sum::<f64>() / per_task.len() as f64)
    };
    (global / count as f64, within)
}

pub fn nc_report(classes: &[ClassFeatures]) -> Result<NcReport> {
    let k = classes.len();
    if k < 2 {
        return Err(Error::TooFewClasses { classes: k });
    }
    let mut means = Vec::with_capacity(k);
    let mut nc1_trace = Vec::with_capacity(k);
    for c in classes {
        if c.features.is_empty() {
            return Err(Error::EmptyClass { label: c.label });
        }
        means.push(mean_vector(&c.features).expect("non-empty"));
        nc1_trace.push(nc1_variability(&c.features)?);
    }
    let d = means[0].len();
    let mut global_mean = vec![0.0; d];
    for m in &means {
        global_mean.iter_mut().zip(m).for_each(|(g, x)| *g += x / k as f64);
    }
    let centered: Vec<Vec<f64>> = means
        .iter()
        .map(|m| m.iter().zip(&global_mean).map(|(a, g)| a - g).collect())
        .collect();

    let offset = 1.0 / (k as f64 - 1.0);
    let mut gap = 0.0;
    let mut pairs = 0usize;
    for a in 0..k {
        for b in a + 1..k {
            gap += cosine(&centered[a], &centered[b]) + offset;
            pairs += 1;
        }
    }
    let mean_centered_cosine_gap = gap / pairs as f64;

    let mut tasks: Vec<usize> = classes.iter().map(|c| c.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mut stds = Vec::new();
    for t in &tasks {
        let members: Vec<usize> = (0..k).filter(|&i| classes[i].task == *t).collect();
        let mut cos = Vec::new();
        for (x, &a) in members.iter().enumerate() {
            for &b in &members[x + 1..] {
                cos.push(cosine(&centered[a], &centered[b]));
            }
        }
        if !cos.is_empty() {
            stds.push(population_std(&cos));
        }
    }
    let within_task_cosine_std = if stds.is_empty() {
        0.0
    } else {
        stds.iter().sum::<f64>() / stds.len() as f64
    };

    let retained: Vec<f64> = classes
        .iter()
        .zip(&means)
        .filter_map(|(c, m)| c.retained_mean.as_ref().map(|r| cosine(r, m)))
        .collect();
    let retention_cosine = if retained.is_empty() {
        None
    } else {
        Some(retained.iter().sum::<f64>() / retained.len() as f64)
    };

    let vertices: Vec<Vec<f64>> = classes.iter().map(|c| c.vertex.clone()).collect();
    let (prototype_cosine_global, prototype_cosine_within_task) =
        pair_cosines(classes, &centered, &vertices);
    let (head_prototype_cosine_global, head_prototype_cosine_within_task) =
        if classes.iter().all(|c| c.head_row.is_some()) {
            let rows: Vec<Vec<f64>> = classes
                .iter()
                .map(|c| c.head_row.clone().expect("checked"))
                .collect();
            let (g, w) = pair_cosines(classes, &centered, &rows);
            (Some(g), w)
        } else {
            (None, None)
        };

    Ok(NcReport {
        labels: classes.iter().map(|c| c.label).collect(),
        nc1_trace,
        mean_centered_cosine_gap,
        within_task_cosine_std,
        retention_cosine,
        prototype_cosine_global,
        prototype_cosine_within_task,
        head_prototype_cosine_global,
        head_prototype_cosine_within_task,
        global_mean,
    })
}
