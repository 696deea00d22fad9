use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{split_per_class, Task, TaskStream};
use crate::error::{Error, Result};

/// Class centers live on the sphere of this radius in input space.
pub const SPHERE_RADIUS: f64 = 5.0;
const MAX_CENTER_DRAWS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_std: f64,
    pub seed: u64,
}

/// Gaussian blobs around well-separated centers on a sphere, labelled
/// `0..tasks * classes_per_task`, task `t` holding the `t`-th consecutive
/// block of classes.
pub fn gen_synthetic_stream(spec: &SyntheticSpec) -> Result<TaskStream> {
    if spec.tasks == 0 || spec.classes_per_task == 0 || spec.input_dim == 0 {
        return Err(Error::Data("tasks, classes_per_task and input_dim must be positive".into()));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::Data("samples_per_class must be positive".into()));
    }
    if !(spec.cluster_std >= 0.0 && spec.cluster_std.is_finite()) {
        return Err(Error::Data(format!("invalid cluster_std {}", spec.cluster_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.tasks * spec.classes_per_task;
    let min_dist = 2.0 * spec.cluster_std;

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut draws = 0usize;
    while centers.len() < total {
        if draws == MAX_CENTER_DRAWS {
            return Err(Error::Data(format!(
                "could not place {total} centers {min_dist} apart after {MAX_CENTER_DRAWS} draws; try a larger input_dim"
            )));
        }
        draws += 1;
        let mut c: Vec<f64> = (0..spec.input_dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        c.iter_mut().for_each(|x| *x *= SPHERE_RADIUS / n);
        let far_enough = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist
        });
        if far_enough {
            centers.push(c);
        }
    }

    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let classes: Vec<usize> = (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let per_class: Vec<Vec<Vec<f64>>> = classes
            .iter()
            .map(|&c| {
                (0..spec.samples_per_class)
                    .map(|_| {
                        centers[c]
                            .iter()
                            .map(|m| m + spec.cluster_std * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let (train, test) = split_per_class(&classes, per_class)?;
        tasks.push(Task { classes, train, test });
    }
    TaskStream::new(tasks)
}
