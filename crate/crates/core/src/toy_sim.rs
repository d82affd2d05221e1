//! Rank sweep on a pair of sinusoid tasks: one shared adapter against one
//! half-rank adapter per task.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::client::{train_adapter, BatchSize, LocalTraining};
use crate::data::{generate_task, Shard, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{loss, Activation, Adapter, BaseModel, LossKind};
use crate::numeric::{gaussian_fill, Matrix, Rng};
use crate::streams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Shared,
    PerTask,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Shared => "shared",
            Mode::PerTask => "per_task",
        })
    }
}

fn default_tasks() -> Vec<TaskSpec> {
    let mut a = TaskSpec::sinusoid(1, 0.0, 0.05, 100);
    let mut b = TaskSpec::sinusoid(2, 0.5, 0.15, 100);
    if let crate::data::TaskKind::SinusoidRegression { context, .. } = &mut a.kind {
        *context = vec![1.0, 0.0];
    }
    if let crate::data::TaskKind::SinusoidRegression { context, .. } = &mut b.kind {
        *context = vec![0.0, 1.0];
    }
    vec![a, b]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seed: u64,
    /// Total adapter rank per point, ascending.
    pub ranks: Vec<usize>,
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: BatchSize,
    pub repetitions: usize,
    /// Hidden layer widths of the frozen base network.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Std of the frozen first-layer weights and biases.
    pub input_scale: f64,
    pub init_std: f64,
    pub heldout_samples: usize,
    pub tasks: Vec<TaskSpec>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ranks: vec![1, 2, 4, 8, 16, 32],
            epochs: 1000,
            eta: 0.02,
            batch_size: BatchSize::Full,
            repetitions: 10,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            input_scale: 3.0,
            init_std: 0.1,
            heldout_samples: 500,
            tasks: default_tasks(),
        }
    }
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return bad("ranks: need at least one rank, each at least 1".into());
        }
        if self.ranks.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("ranks: must be strictly ascending, got {:?}", self.ranks));
        }
        if self.epochs == 0 {
            return bad("epochs: must be at least 1".into());
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("eta: must be positive, got {}", self.eta));
        }
        if self.repetitions == 0 {
            return bad("repetitions: must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.heldout_samples == 0 {
            return bad("hidden needs at least one layer, widths and heldout_samples at least 1".into());
        }
        if !(self.input_scale >= 0.0) || !(self.init_std >= 0.0) {
            return bad("input_scale and init_std must be >= 0".into());
        }
        if self.tasks.len() != 2 {
            return bad(format!("tasks: need exactly 2, got {}", self.tasks.len()));
        }
        for t in &self.tasks {
            t.validate()?;
            if t.loss_kind() != LossKind::Mse {
                return bad(format!("tasks: task {} is not a regression task", t.task_id));
            }
        }
        if self.tasks[0].input_dim() != self.tasks[1].input_dim() {
            return bad("tasks: both tasks need the same input width".into());
        }
        if self.tasks[0].task_id == self.tasks[1].task_id {
            return bad("tasks: task ids must differ".into());
        }
        Ok(())
    }
}

/// Adapter rank used by each per-task adapter for a total rank `r`.
pub fn per_task_rank(total: usize) -> usize {
    (total / 2).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub rank: usize,
    pub mode: Mode,
    pub seed: u64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub rank: usize,
    pub mode: Mode,
    /// Rank of each trained adapter.
    pub adapter_rank: usize,
    /// Set when `rank / 2` fell below 1 and was raised to 1.
    pub rank_floored: bool,
    pub mean_mse: f64,
    pub std_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub raw: Vec<RawRow>,
    pub summary: Vec<SummaryRow>,
}

impl SweepResult {
    pub fn mean(&self, rank: usize, mode: Mode) -> Option<f64> {
        self.summary.iter().find(|r| r.rank == rank && r.mode == mode).map(|r| r.mean_mse)
    }
}

struct Replicate {
    seed: u64,
    model: BaseModel,
    train: Vec<Shard>,
    heldout: Vec<(Matrix, Matrix)>,
}

/// First layer drawn with std `input_scale`, later layers with
/// `1/sqrt(fan_in)`.
fn base_model(config: &SweepConfig, rng: &mut Rng) -> Result<BaseModel> {
    let mut dims = vec![config.tasks[0].input_dim()];
    dims.extend(&config.hidden);
    dims.push(1);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let std = if l == 0 { config.input_scale } else { 1.0 / (w[0] as f64).sqrt() };
            Ok((gaussian_fill(rng, w[1], w[0], 0.0, std)?, gaussian_fill(rng, w[1], 1, 0.0, std)?))
        })
        .collect::<Result<Vec<_>>>()?;
    BaseModel::new(layers, config.activation)
}

fn replicate(config: &SweepConfig, rep: usize) -> Result<Replicate> {
    let seed = crate::numeric::derive_seed(config.seed, &[streams::TOY, rep as u64]);
    let model = base_model(config, &mut Rng::stream(seed, &[streams::MODEL]))?;
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for spec in &config.tasks {
        let id = spec.task_id.0 as u64;
        let (x, y) = generate_task(spec, &mut Rng::stream(seed, &[streams::TRAIN_DATA, id]))?;
        train.push(Shard { client_id: crate::data::ClientId(0), task_id: spec.task_id, x, y });
        let mut held = spec.clone();
        held.sample_count = config.heldout_samples;
        heldout.push(generate_task(&held, &mut Rng::stream(seed, &[streams::HELDOUT_DATA, id]))?);
    }
    Ok(Replicate { seed, model, train, heldout })
}

fn heldout_mse(rep: &Replicate, adapter: &Adapter, task: usize) -> Result<f64> {
    let (x, y) = &rep.heldout[task];
    loss(&rep.model, adapter, x, y, LossKind::Mse)
}

fn run_point(config: &SweepConfig, rep: &Replicate, rank: usize, mode: Mode) -> Result<f64> {
    let training = LocalTraining { tau: config.epochs, eta: config.eta, batch: config.batch_size, loss: LossKind::Mse };
    let init = |slot: u64, r: usize| {
        let mut rng = Rng::stream(rep.seed, &[streams::INIT_ADAPTER, rank as u64, slot]);
        Adapter::init(&rep.model, r, config.init_std, &mut rng)
    };
    let train_rng = |slot: u64| Rng::stream(rep.seed, &[streams::LOCAL, rank as u64, slot]);
    match mode {
        Mode::Shared => {
            let union = Shard {
                client_id: rep.train[0].client_id,
                task_id: rep.train[0].task_id,
                x: Matrix::hconcat(&[&rep.train[0].x, &rep.train[1].x])?,
                y: Matrix::hconcat(&[&rep.train[0].y, &rep.train[1].y])?,
            };
            let (adapter, _) = train_adapter(&rep.model, &init(0, rank)?, &union, &training, &mut train_rng(0))?;
            Ok(0.5 * (heldout_mse(rep, &adapter, 0)? + heldout_mse(rep, &adapter, 1)?))
        }
        Mode::PerTask => {
            let r = per_task_rank(rank);
            let mut total = 0.0;
            for task in 0..2 {
                let slot = 1 + task as u64;
                let (adapter, _) = train_adapter(&rep.model, &init(slot, r)?, &rep.train[task], &training, &mut train_rng(slot))?;
                total += heldout_mse(rep, &adapter, task)?;
            }
            Ok(0.5 * total)
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Like [`run_sweep`] but on a dedicated pool of `threads` workers.
pub fn run_sweep_with_threads(config: &SweepConfig, threads: usize) -> Result<SweepResult> {
    if threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run_sweep(config))
    }
    #[cfg(not(feature = "parallel"))]
    run_sweep(config)
}

/// Runs every (repetition, rank, mode) point. Output order is fixed by
/// `(rank, mode, repetition)` regardless of scheduling.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let reps = (0..config.repetitions).map(|r| replicate(config, r)).collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for &rank in &config.ranks {
        for mode in [Mode::Shared, Mode::PerTask] {
            for rep in 0..reps.len() {
                jobs.push((rank, mode, rep));
            }
        }
    }
    let work = |&(rank, mode, rep): &(usize, Mode, usize)| -> Result<RawRow> {
        let mse = run_point(config, &reps[rep], rank, mode)?;
        Ok(RawRow { rank, mode, seed: reps[rep].seed, mse })
    };
    #[cfg(feature = "parallel")]
    let raw: Vec<RawRow> = {
        use rayon::prelude::*;
        jobs.par_iter().map(work).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let raw: Vec<RawRow> = jobs.iter().map(work).collect::<Result<_>>()?;

    let summary = raw
        .chunks(reps.len())
        .map(|chunk| {
            let values: Vec<f64> = chunk.iter().map(|r| r.mse).collect();
            let (mean_mse, std_mse) = mean_std(&values);
            let (rank, mode) = (chunk[0].rank, chunk[0].mode);
            let adapter_rank = match mode {
                Mode::Shared => rank,
                Mode::PerTask => per_task_rank(rank),
            };
            SummaryRow { rank, mode, adapter_rank, rank_floored: mode == Mode::PerTask && rank < 2, mean_mse, std_mse }
        })
        .collect();
    Ok(SweepResult { raw, summary })
}

pub fn write_raw_csv(rows: &[RawRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "rank,mode,seed,mse")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.rank, r.mode, r.seed, r.mse)?;
    }
    Ok(())
}

pub fn write_summary_csv(rows: &[SummaryRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "rank,mode,adapter_rank,rank_floored,mean_mse,std_mse")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.rank, r.mode, r.adapter_rank, r.rank_floored, r.mean_mse, r.std_mse)?;
    }
    Ok(())
}
