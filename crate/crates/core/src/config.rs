//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{BatchSize, LocalTraining};
use crate::data::{TaskId, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{Activation, LossKind};
use crate::server::KMeansParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// One adapter per local task, clustered into one group per task.
    FlTac,
    /// One adapter per client trained on all of its data; plain FedAvg.
    SingleAdapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub alpha: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub tau: usize,
    pub eta: f64,
    #[serde(default = "full_batch")]
    pub batch_size: BatchSize,
    pub rank: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn full_batch() -> BatchSize {
    BatchSize::Full
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the tasks.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u32,
    pub method: Method,
    pub clients: usize,
    pub participation: f64,
    #[serde(default = "default_heldout")]
    pub heldout_samples: usize,
    #[serde(default)]
    pub weighted_aggregation: bool,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: usize,
    pub partition: PartitionConfig,
    pub training: TrainingConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub kmeans: KMeansParams,
    pub tasks: Vec<TaskSpec>,
}

fn default_heldout() -> usize {
    500
}

fn default_bytes_per_param() -> usize {
    8
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Number of tasks, which is also the number of server clusters.
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn loss_kind(&self) -> LossKind {
        self.tasks[0].loss_kind()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.tasks[0].input_dim()];
        dims.extend(&self.model.hidden);
        dims.push(self.tasks[0].output_dim());
        dims
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining { tau: self.training.tau, eta: self.training.eta, batch: self.training.batch_size, loss: self.loss_kind() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(field("rounds", "must be at least 1"));
        }
        if self.clients == 0 {
            return Err(field("clients", "must be at least 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(field("participation", format!("must be in (0, 1], got {}", self.participation)));
        }
        if self.heldout_samples == 0 {
            return Err(field("heldout_samples", "must be at least 1"));
        }
        if self.bytes_per_param != 4 && self.bytes_per_param != 8 {
            return Err(field("bytes_per_param", format!("must be 4 or 8, got {}", self.bytes_per_param)));
        }
        if !(self.partition.alpha > 0.0) || !self.partition.alpha.is_finite() {
            return Err(field("partition.alpha", format!("must be positive, got {}", self.partition.alpha)));
        }
        if !(self.partition.threshold >= 0.0 && self.partition.threshold < 1.0) {
            return Err(field("partition.threshold", format!("must be in [0, 1), got {}", self.partition.threshold)));
        }
        if self.partition.threshold * self.clients as f64 > 1.0 {
            return Err(field(
                "partition.threshold",
                format!("{} clients cannot all clear a threshold of {}", self.clients, self.partition.threshold),
            ));
        }
        if self.training.tau == 0 {
            return Err(field("training.tau", "must be at least 1"));
        }
        if !(self.training.eta > 0.0) || !self.training.eta.is_finite() {
            return Err(field("training.eta", format!("must be positive, got {}", self.training.eta)));
        }
        if self.training.rank == 0 {
            return Err(field("training.rank", "must be at least 1"));
        }
        if !(self.training.init_std >= 0.0) || !self.training.init_std.is_finite() {
            return Err(field("training.init_std", format!("must be >= 0, got {}", self.training.init_std)));
        }
        if self.model.hidden.contains(&0) {
            return Err(field("model.hidden", "widths must be at least 1"));
        }
        if self.kmeans.max_iters == 0 || self.kmeans.restarts == 0 || !(self.kmeans.tol >= 0.0) {
            return Err(field("kmeans", "max_iters and restarts must be at least 1 and tol >= 0"));
        }
        if self.tasks.is_empty() {
            return Err(field("tasks", "at least one task is required"));
        }
        let mut ids: Vec<TaskId> = Vec::new();
        for task in &self.tasks {
            task.validate()?;
            if ids.contains(&task.task_id) {
                return Err(field("tasks", format!("duplicate task_id {}", task.task_id)));
            }
            ids.push(task.task_id);
            let first = &self.tasks[0];
            if task.input_dim() != first.input_dim() || task.output_dim() != first.output_dim() || task.loss_kind() != first.loss_kind() {
                return Err(field("tasks", format!("task {} does not share the input, output, and loss of task {}", task.task_id, first.task_id)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
seed = 7
rounds = 3
method = "fl-tac"
clients = 4
participation = 1.0

[partition]
alpha = 0.5

[training]
tau = 5
eta = 0.5
batch_size = "full"
rank = 2

[model]
hidden = [8]
activation = "tanh"

[[tasks]]
task_id = 1
kind = "gaussian_blob_classification"
classes = 3
input_dim = 4
separation = 3.0
noise_std = 0.5
sample_count = 60

[[tasks]]
task_id = 2
kind = "gaussian_blob_classification"
classes = 3
input_dim = 4
separation = 3.0
noise_std = 0.5
label_shift = 1
sample_count = 60
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        assert_eq!(c.partition.threshold, 0.01);
        assert_eq!(c.kmeans, KMeansParams::default());
        assert_eq!(c.bytes_per_param, 8);
        assert_eq!(c.layer_dims(), vec![4, 8, 3]);
        assert_eq!(c.loss_kind(), LossKind::SoftmaxCe);
    }

    #[test]
    fn round_trips() {
        let c = ExperimentConfig::from_toml_str(EXAMPLE).unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        let mut fixed = c.clone();
        fixed.training.batch_size = BatchSize::Fixed(16);
        fixed.method = Method::SingleAdapter;
        assert_eq!(ExperimentConfig::from_toml_str(&fixed.to_toml_string().unwrap()).unwrap(), fixed);
    }

    #[test]
    fn field_level_errors() {
        let cases = [
            ("participation = 1.0", "participation = 1.5", "participation"),
            ("rounds = 3", "rounds = 0", "rounds"),
            ("rank = 2", "rank = 0", "training.rank"),
            ("alpha = 0.5", "alpha = -1.0", "partition.alpha"),
            ("label_shift = 1\nsample_count = 60", "label_shift = 1\nsample_count = 0", "sample_count"),
            ("input_dim = 4\nseparation = 3.0\nnoise_std = 0.5\nlabel_shift", "input_dim = 5\nseparation = 3.0\nnoise_std = 0.5\nlabel_shift", "tasks"),
            ("clients = 4", "clients = 4\nbogus = 1", "bogus"),
            ("classes = 3\ninput_dim = 4\nseparation = 3.0\nnoise_std = 0.5\nlabel_shift", "classes = 3\ninput_dim = 4\nseparation = 3.0\nnoise_std = 0.5\ncolour = 2\nlabel_shift", "colour"),
        ];
        for (from, to, needle) in cases {
            assert!(EXAMPLE.contains(from), "{from}");
            let err = ExperimentConfig::from_toml_str(&EXAMPLE.replacen(from, to, 1)).unwrap_err();
            assert!(err.is_config(), "{err}");
            assert!(err.to_string().contains(needle), "{err} lacks {needle}");
        }
    }
}
