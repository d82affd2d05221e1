//! Browser bindings. Every entry point takes TOML or plain numbers and
//! returns a JSON string for the page to draw.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use fltac_core::config::ExperimentConfig;
use fltac_core::data::{dirichlet_partition, generate_task, TaskPool, TaskSpec};
use fltac_core::numeric::Rng;
use fltac_core::simulation::Experiment;
use fltac_core::toy_sim::{run_sweep, SweepConfig};

fn to_json(value: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Rank sweep. `config_toml` may be empty for the built-in defaults.
pub fn toy_sweep_json(config_toml: &str) -> Result<String, String> {
    let config = SweepConfig::from_toml_str(config_toml).map_err(|e| e.to_string())?;
    let result = run_sweep(&config).map_err(|e| e.to_string())?;
    to_json(&result.summary)
}

#[derive(Serialize)]
struct PartitionView {
    /// `proportions[task][client]`.
    proportions: Vec<Vec<f64>>,
    /// `counts[task][client]`.
    counts: Vec<Vec<usize>>,
}

/// Dirichlet split of `tasks` pools of `samples` each across `clients`.
pub fn partition_json(tasks: u32, clients: u32, samples: u32, alpha: f64, threshold: f64, seed: u64) -> Result<String, String> {
    let mut rng = Rng::new(seed);
    let pools = (1..=tasks)
        .map(|t| {
            let spec = TaskSpec::sinusoid(t, 0.0, 0.0, samples as usize);
            let (x, y) = generate_task(&spec, &mut rng)?;
            Ok(TaskPool { task_id: spec.task_id, x, y })
        })
        .collect::<fltac_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let partition = dirichlet_partition(&pools, clients as usize, alpha, threshold, &mut rng).map_err(|e| e.to_string())?;
    let mut counts = vec![vec![0; clients as usize]; tasks as usize];
    for shard in &partition.shards {
        let t = pools.iter().position(|p| p.task_id == shard.task_id).expect("shard of a known task");
        counts[t][shard.client_id.0 as usize] = shard.len();
    }
    to_json(&PartitionView { proportions: partition.proportions, counts })
}

#[derive(Serialize)]
struct RoundView {
    round: u32,
    mean_eval_loss: f64,
    cluster_accuracy: Option<f64>,
    purity: Option<f64>,
    /// `[x, y, true task, cluster]` per upload.
    points: Vec<(f64, f64, u32, usize)>,
}

/// Full experiment; one entry per round with its 2-D projection.
pub fn experiment_json(config_toml: &str) -> Result<String, String> {
    let config = ExperimentConfig::from_toml_str(config_toml).map_err(|e| e.to_string())?;
    let mut experiment = Experiment::build(&config).map_err(|e| e.to_string())?;
    let mut rounds = Vec::new();
    experiment
        .run(|out| {
            rounds.push(RoundView {
                round: out.record.round,
                mean_eval_loss: out.record.mean_eval_loss(),
                cluster_accuracy: out.record.cluster_accuracy,
                purity: out.record.purity,
                points: out.points.iter().map(|p| (p.projection.0, p.projection.1, p.true_task.0, p.cluster)).collect(),
            });
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    to_json(&rounds)
}

#[wasm_bindgen]
pub fn toy_sweep(config_toml: &str) -> Result<String, JsError> {
    toy_sweep_json(config_toml).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn partition(tasks: u32, clients: u32, samples: u32, alpha: f64, threshold: f64, seed: u64) -> Result<String, JsError> {
    partition_json(tasks, clients, samples, alpha, threshold, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn experiment(config_toml: &str) -> Result<String, JsError> {
    experiment_json(config_toml).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts_conserve_samples() {
        let json = partition_json(3, 5, 200, 0.5, 0.01, 4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for row in v["counts"].as_array().unwrap() {
            let total: u64 = row.as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
            assert_eq!(total, 200);
        }
        assert!(partition_json(1, 5, 10, -1.0, 0.01, 4).is_err());
    }

    #[test]
    fn small_sweep_reports_both_modes() {
        let json = toy_sweep_json("ranks = [2]\nepochs = 5\nrepetitions = 1\nheldout_samples = 20").unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
    }

    #[test]
    fn experiment_reports_every_round() {
        let toml = r#"
seed = 1
rounds = 2
method = "fl-tac"
clients = 3
participation = 1.0
heldout_samples = 50
[partition]
alpha = 1.0
[training]
tau = 2
eta = 0.5
rank = 1
[model]
hidden = [4]
activation = "tanh"
[[tasks]]
task_id = 1
kind = "gaussian_blob_classification"
classes = 2
input_dim = 2
separation = 3.0
noise_std = 0.5
sample_count = 30
"#;
        let v: serde_json::Value = serde_json::from_str(&experiment_json(toml).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert!(experiment_json("rounds = 0").is_err());
    }

    fn textarea(id: &str) -> &'static str {
        let page = include_str!("../www/index.html");
        let open = format!("<textarea id=\"{id}\">");
        let start = page.find(&open).expect("textarea present") + open.len();
        let len = page[start..].find("</textarea>").expect("textarea closed");
        &page[start..start + len]
    }

    #[test]
    fn page_defaults_are_valid() {
        let v: serde_json::Value = serde_json::from_str(&experiment_json(textarea("e-config")).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 10);
        let sweep = SweepConfig::from_toml_str(textarea("t-config")).unwrap();
        assert_eq!(sweep.ranks, vec![1, 2, 4, 8]);
    }
}
