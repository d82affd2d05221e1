//! Command-line driver: `run`, `toy-sim`, and `cluster-eval`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fltac_core::client::Handle;
use fltac_core::config::{ExperimentConfig, Method};
use fltac_core::data::{write_shards_csv, ClientId, TaskId};
use fltac_core::metrics::{cluster_accuracy, purity};
use fltac_core::model::Adapter;
use fltac_core::numeric::Rng;
use fltac_core::server::kmeans_best_of;
use fltac_core::simulation::{Experiment, RoundOutput};
use fltac_core::toy_sim::{run_sweep_with_threads, write_raw_csv, write_summary_csv, SweepConfig};
use fltac_core::{streams, Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fltac", version, about = "Federated fine-tuning with per-task low-rank adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a federated experiment.
    Run(RunArgs),
    /// Sweep adapter rank on the two-sinusoid toy problem.
    ToySim(ToyArgs),
    /// Recompute clustering metrics offline from a finished run.
    ClusterEval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Override the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to a fresh timestamped directory under `runs/`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long)]
    pub quiet: bool,
    /// Worker threads for client training. Results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct ToyArgs {
    /// Sweep config; built-in defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory written by `run`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Trend CSV path; defaults to `<run-dir>/cluster_eval.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| ()),
        Command::ToySim(a) => cmd_toy_sim(a).map(|_| ()),
        Command::ClusterEval(a) => cmd_cluster_eval(a).map(|_| ()),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("fltac: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Creates `dir`, or a fresh `runs/<prefix>-<unix seconds>[-n]` directory.
fn prepare_out_dir(dir: Option<&Path>, prefix: &str) -> Result<PathBuf> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        return Ok(dir.to_path_buf());
    }
    fs::create_dir_all("runs")?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    for n in 0.. {
        let name = if n == 0 { format!("{prefix}-{stamp}") } else { format!("{prefix}-{stamp}-{n}") };
        let path = Path::new("runs").join(name);
        match fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn json_line(out: &mut impl Write, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(out, "{line}")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Summary {
    method: Method,
    seed: u64,
    rounds: u32,
    clients_with_data: usize,
    adapter_param_count: usize,
    final_per_task_eval_loss: BTreeMap<TaskId, f64>,
    final_mean_eval_loss: f64,
    final_cluster_accuracy: Option<f64>,
    final_purity: Option<f64>,
    cumulative_bytes: u64,
}

struct RunWriters {
    dir: PathBuf,
    rounds: BufWriter<File>,
    ledger: BufWriter<File>,
    projections: BufWriter<File>,
    truth: BufWriter<File>,
}

impl RunWriters {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("uploads"))?;
        fs::create_dir_all(dir.join("adapters"))?;
        let mut projections = create(&dir.join("projections.csv"))?;
        writeln!(projections, "round,client_id,handle,true_task_id,cluster_id,x,y")?;
        let mut truth = create(&dir.join("truth.csv"))?;
        writeln!(truth, "round,handle,client_id,true_task_id")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            rounds: create(&dir.join("rounds.jsonl"))?,
            ledger: create(&dir.join("server_ledger.jsonl"))?,
            projections,
            truth,
        })
    }

    fn round(&mut self, out: &RoundOutput) -> Result<()> {
        let round = out.record.round;
        json_line(&mut self.rounds, &out.record)?;
        json_line(&mut self.ledger, &out.ledger)?;
        let mut uploads = create(&self.dir.join("uploads").join(format!("round_{round:03}.csv")))?;
        let width = out.points.first().map_or(0, |p| p.upload.vector.len());
        let mut header = vec!["client_id".to_string(), "handle".into(), "sample_count".into()];
        header.extend((0..width).map(|i| format!("v{i}")));
        writeln!(uploads, "{}", header.join(","))?;
        for p in &out.points {
            let u = &p.upload;
            let values: Vec<String> = u.vector.iter().map(f64::to_string).collect();
            writeln!(uploads, "{},{},{},{}", u.client_id, u.handle, u.sample_count, values.join(","))?;
            writeln!(self.truth, "{round},{},{},{}", u.handle, u.client_id, p.true_task)?;
            writeln!(
                self.projections,
                "{round},{},{},{},{},{},{}",
                u.client_id, u.handle, p.true_task, p.cluster, p.projection.0, p.projection.1
            )?;
        }
        uploads.flush()?;
        for w in [&mut self.rounds, &mut self.ledger, &mut self.projections, &mut self.truth] {
            w.flush()?;
        }
        Ok(())
    }
}

fn progress(quiet: bool, msg: impl FnOnce() -> String) {
    if !quiet {
        eprintln!("{}", msg());
    }
}

/// Runs a full experiment and returns the output directory.
pub fn cmd_run(args: &RunArgs) -> Result<PathBuf> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    let mut experiment = Experiment::build(&config)?;
    experiment.set_threads(args.common.threads)?;
    let dir = prepare_out_dir(args.common.out_dir.as_deref(), "run")?;
    fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
    write_shards_csv(&experiment.partition().shards, create(&dir.join("shards.csv"))?)?;

    let mut writers = RunWriters::open(&dir)?;
    let mut last: Option<RoundOutput> = None;
    let quiet = args.common.quiet;
    experiment.run(|out| {
        writers.round(out)?;
        progress(quiet, || {
            let acc = out.record.cluster_accuracy.map_or("-".into(), |a| format!("{a:.3}"));
            format!("round {:>3}  mean loss {:.5}  accuracy {acc}", out.record.round, out.record.mean_eval_loss())
        });
        last = Some(out.clone());
        Ok(())
    })?;
    let last = last.expect("at least one round");

    for (n, global) in last.globals.iter().enumerate() {
        fs::write(dir.join("adapters").join(format!("cluster_{n}.lrad")), global.to_bytes())?;
    }
    let summary = Summary {
        method: config.method,
        seed: config.seed,
        rounds: config.rounds,
        clients_with_data: experiment.clients().len(),
        adapter_param_count: experiment.layout().param_count(),
        final_per_task_eval_loss: last.record.per_task_eval_loss.clone(),
        final_mean_eval_loss: last.record.mean_eval_loss(),
        final_cluster_accuracy: last.record.cluster_accuracy,
        final_purity: last.record.purity,
        cumulative_bytes: last.record.cumulative_bytes,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("summary.json"), text + "\n")?;
    progress(quiet, || format!("wrote {}", dir.display()));
    Ok(dir)
}

/// Runs the rank sweep and returns the output directory.
pub fn cmd_toy_sim(args: &ToyArgs) -> Result<PathBuf> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            SweepConfig::from_toml_str(&text)?
        }
        None => SweepConfig::default(),
    };
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    config.validate()?;
    let result = run_sweep_with_threads(&config, args.common.threads)?;
    let dir = prepare_out_dir(args.common.out_dir.as_deref(), "toy")?;
    fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
    write_raw_csv(&result.raw, create(&dir.join("toy_raw.csv"))?)?;
    write_summary_csv(&result.summary, create(&dir.join("toy_summary.csv"))?)?;
    progress(args.common.quiet, || {
        result
            .summary
            .iter()
            .map(|r| format!("rank {:>3} {:>8}  mse {:.5} +- {:.5}", r.rank, r.mode.to_string(), r.mean_mse, r.std_mse))
            .collect::<Vec<_>>()
            .join("\n")
    });
    Ok(dir)
}

/// One round's uploads as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedRound {
    pub round: u32,
    pub handles: Vec<Handle>,
    pub vectors: Vec<Vec<f64>>,
}

fn parse_handle(text: &str) -> Result<Handle> {
    u64::from_str_radix(text, 16).map(Handle).map_err(|_| Error::Format(format!("bad handle {text:?}")))
}

fn read_uploads(path: &Path, round: u32) -> Result<SavedRound> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))??;
    let width = header.split(',').count().saturating_sub(3);
    let mut saved = SavedRound { round, handles: Vec::new(), vectors: Vec::new() };
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 3 {
            return Err(Error::Format(format!("{}: row with {} fields, expected {}", path.display(), fields.len(), width + 3)));
        }
        saved.handles.push(parse_handle(fields[1])?);
        saved.vectors.push(
            fields[3..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| Error::Format(format!("{}: bad value {f:?}", path.display()))))
                .collect::<Result<_>>()?,
        );
    }
    Ok(saved)
}

/// Reads every `uploads/round_NNN.csv` under `run_dir`, in round order.
pub fn read_saved_rounds(run_dir: &Path) -> Result<Vec<SavedRound>> {
    let dir = run_dir.join("uploads");
    let entries = fs::read_dir(&dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
    let mut rounds = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(n) = name.strip_prefix("round_").and_then(|n| n.strip_suffix(".csv")) {
            let round = n.parse().map_err(|_| Error::Format(format!("unexpected upload file {name}")))?;
            rounds.push(read_uploads(&path, round)?);
        }
    }
    if rounds.is_empty() {
        return Err(Error::Input(format!("no round_NNN.csv files in {}", dir.display())));
    }
    rounds.sort_by_key(|r| r.round);
    Ok(rounds)
}

/// Reads `truth.csv` into `round -> handle -> task`.
pub fn read_truth(path: &Path) -> Result<BTreeMap<u32, BTreeMap<Handle, TaskId>>> {
    let file = File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<u32, BTreeMap<Handle, TaskId>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("{} row {}: {line:?}", path.display(), i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let round: u32 = f[0].parse().map_err(|_| bad())?;
        let _: ClientId = ClientId(f[2].parse().map_err(|_| bad())?);
        out.entry(round).or_default().insert(parse_handle(f[1])?, TaskId(f[3].parse().map_err(|_| bad())?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub round: u32,
    pub cluster_accuracy: f64,
    pub purity: f64,
    pub inertia: f64,
}

/// Re-clusters each saved round with the run's seed and K-means settings.
pub fn cluster_eval(run_dir: &Path) -> Result<Vec<EvalRow>> {
    let config = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let rounds = read_saved_rounds(run_dir)?;
    let truth = read_truth(&run_dir.join("truth.csv"))?;
    let n = config.task_count();
    rounds
        .iter()
        .map(|saved| {
            let points: Vec<&[f64]> = saved.vectors.iter().map(Vec::as_slice).collect();
            let mut rng = Rng::stream(config.seed, &[streams::KMEANS, saved.round as u64]);
            let clustering = kmeans_best_of(&points, n, &mut rng, &config.kmeans)?;
            let assignment: BTreeMap<Handle, usize> = saved.handles.iter().copied().zip(clustering.assignment.iter().copied()).collect();
            let round_truth = truth
                .get(&saved.round)
                .ok_or_else(|| Error::Input(format!("truth ledger has no round {}", saved.round)))?;
            Ok(EvalRow {
                round: saved.round,
                cluster_accuracy: cluster_accuracy(&assignment, round_truth, n)?,
                purity: purity(&assignment, round_truth)?,
                inertia: clustering.inertia,
            })
        })
        .collect()
}

pub fn cmd_cluster_eval(args: &EvalArgs) -> Result<PathBuf> {
    let rows = cluster_eval(&args.run_dir)?;
    let path = args.out.clone().unwrap_or_else(|| args.run_dir.join("cluster_eval.csv"));
    let mut out = create(&path)?;
    writeln!(out, "round,cluster_accuracy,purity,inertia")?;
    for r in &rows {
        writeln!(out, "{},{},{},{}", r.round, r.cluster_accuracy, r.purity, r.inertia)?;
    }
    out.flush()?;
    progress(args.quiet, || format!("wrote {}", path.display()));
    Ok(path)
}

/// Loads a saved global adapter.
pub fn read_adapter(path: &Path) -> Result<Adapter> {
    Adapter::from_bytes(&fs::read(path)?)
}
