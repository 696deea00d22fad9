use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::CeScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ClassIl,
    TaskIl,
}

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Drop cross-entropy from tasks after the first.
    NoCe,
    /// Alignment weight forced to zero.
    NoAlign,
    /// Distillation weight forced to zero.
    NoDistill,
    /// First-task ETF from a random basis instead of the fitted one.
    PredefinedBaseEtf,
    /// One random ETF covering every class of the stream, fixed from the start.
    PredefinedGlobalEtf,
    /// Predict with the linear head instead of ETF cosines.
    LinearClassifierInference,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::NoCe,
        Ablation::NoAlign,
        Ablation::NoDistill,
        Ablation::PredefinedBaseEtf,
        Ablation::PredefinedGlobalEtf,
        Ablation::LinearClassifierInference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoCe => "no_ce",
            Ablation::NoAlign => "no_align",
            Ablation::NoDistill => "no_distill",
            Ablation::PredefinedBaseEtf => "predefined_base_etf",
            Ablation::PredefinedGlobalEtf => "predefined_global_etf",
            Ablation::LinearClassifierInference => "linear_classifier_inference",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

/// Which samples the per-checkpoint neural-collapse report is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NcFeatureSource {
    /// Full training sets of every task seen so far.
    #[default]
    TaskData,
    /// Current task's training set plus the replay buffer.
    ReplayMixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        samples_per_class: usize,
        input_dim: usize,
        cluster_std: f64,
        /// Seed of the generated stream; the experiment seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub buffer_capacity: usize,
    pub ce_scope: CeScope,
    pub scenario: Scenario,
    #[serde(default)]
    pub ablation: Ablation,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub nc_feature_source: NcFeatureSource,
}

impl ExperimentConfig {
    /// Defaults for the five-task synthetic stream.
    pub fn synthetic_default(seed: u64) -> Self {
        Self {
            seed,
            tasks: 5,
            classes_per_task: 2,
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.03,
            momentum: 0.0,
            weight_decay: 0.0,
            lambda1: 18.0,
            lambda2: 170.0,
            buffer_capacity: 200,
            ce_scope: CeScope::AllSeen,
            scenario: Scenario::ClassIl,
            ablation: Ablation::None,
            model: ModelSpec {
                hidden: vec![64, 64],
                feature_dim: 16,
            },
            dataset: DatasetSpec::Synthetic {
                samples_per_class: 100,
                input_dim: 16,
                cluster_std: 2.0,
                seed: None,
            },
            nc_feature_source: NcFeatureSource::TaskData,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::NoTraining);
        }
        let positive = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("batch_size", self.batch_size),
            ("model.feature_dim", self.model.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        let reals = [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ];
        for (name, v) in reals {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.learning_rate == 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let total = self.tasks * self.classes_per_task;
        let needed = match self.ablation {
            Ablation::PredefinedGlobalEtf => total,
            _ if self.tasks > 1 => total,
            _ => self.classes_per_task,
        };
        if self.model.feature_dim < needed.max(2) {
            return Err(Error::Config(format!(
                "feature_dim {} cannot hold an ETF over {} classes",
                self.model.feature_dim, needed
            )));
        }
        if let DatasetSpec::Synthetic {
            samples_per_class,
            input_dim,
            cluster_std,
            ..
        } = &self.dataset
        {
            if *samples_per_class == 0 || *input_dim == 0 {
                return Err(Error::Config("dataset sizes must be positive".into()));
            }
            if !(cluster_std.is_finite() && *cluster_std >= 0.0) {
                return Err(Error::Config("cluster_std must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = ExperimentConfig::synthetic_default(7);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn ablation_defaults_to_none_and_other_fields_are_required() {
        let mut v = serde_json::to_value(ExperimentConfig::synthetic_default(1)).unwrap();
        v.as_object_mut().unwrap().remove("ablation");
        let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.ablation, Ablation::None);
        v.as_object_mut().unwrap().remove("lambda2");
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        let mut v = serde_json::to_value(ExperimentConfig::synthetic_default(1)).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut cfg = ExperimentConfig::synthetic_default(1);
        cfg.model.feature_dim = 8;
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig::synthetic_default(1);
        cfg.lambda1 = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_names() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::from_name(a.name()), Some(a));
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
        assert_eq!(Ablation::from_name("nope"), None);
    }
}
