//! Round orchestration: selection, local fine-tuning, upload, clustering,
//! aggregation, write-back, and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{init_client, ClientState, Handle, LocalTraining, Upload};
use crate::config::{ExperimentConfig, Method};
use crate::data::{dirichlet_partition, generate_task, ClientId, Partition, Shard, TaskId, TaskPool};
use crate::error::{Error, Result};
use crate::metrics::{cluster_accuracy, cluster_to_task, comm_bytes, eval_task_loss, project_2d, purity, RoundRecord};
use crate::model::{Adapter, AdapterLayout, BaseModel};
use crate::numeric::{Matrix, Rng};
use crate::server::{select_clients, Clustering, Server, UploadSet};
use crate::streams;

/// Task id under which a single-adapter client pools all of its data.
pub const POOLED_TASK: TaskId = TaskId(0);

/// One line of the server ledger. Holds only what the server itself saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: u32,
    pub selected: Vec<ClientId>,
    pub uploads: usize,
    pub cluster_sizes: Vec<usize>,
    pub inertia: Option<f64>,
    pub aggregate_norms: Vec<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// One uploaded adapter as seen by the evaluator.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub upload: Upload,
    pub true_task: TaskId,
    pub cluster: usize,
    pub projection: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutput {
    pub record: RoundRecord,
    pub ledger: LedgerEntry,
    /// Uploads in server order, joined with truth and projections.
    pub points: Vec<EvalPoint>,
    pub globals: Vec<Adapter>,
}

/// A fully built experiment, advanced one round at a time.
pub struct Experiment {
    config: ExperimentConfig,
    training: LocalTraining,
    model: BaseModel,
    layout: AdapterLayout,
    partition: Partition,
    clients: Vec<ClientState>,
    server: Server,
    heldout: Vec<TaskPool>,
    task_globals: BTreeMap<TaskId, Adapter>,
    cumulative_bytes: u64,
    next_round: u32,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

fn pool_shards(client: ClientId, shards: Vec<Shard>) -> Result<Shard> {
    let xs: Vec<&Matrix> = shards.iter().map(|s| &s.x).collect();
    let ys: Vec<&Matrix> = shards.iter().map(|s| &s.y).collect();
    Ok(Shard { client_id: client, task_id: POOLED_TASK, x: Matrix::hconcat(&xs)?, y: Matrix::hconcat(&ys)? })
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let model = BaseModel::random(&config.layer_dims(), config.model.activation, &mut Rng::stream(seed, &[streams::MODEL]))?;
        let layout = AdapterLayout::for_model(&model, config.training.rank);
        let init = Adapter::init(&model, config.training.rank, config.training.init_std, &mut Rng::stream(seed, &[streams::INIT_ADAPTER]))?;

        let mut pools = Vec::with_capacity(config.tasks.len());
        let mut heldout = Vec::with_capacity(config.tasks.len());
        for spec in &config.tasks {
            let id = spec.task_id.0 as u64;
            let (x, y) = generate_task(spec, &mut Rng::stream(seed, &[streams::TRAIN_DATA, id]))?;
            pools.push(TaskPool { task_id: spec.task_id, x, y });
            let mut held = spec.clone();
            held.sample_count = config.heldout_samples;
            let (x, y) = generate_task(&held, &mut Rng::stream(seed, &[streams::HELDOUT_DATA, id]))?;
            heldout.push(TaskPool { task_id: spec.task_id, x, y });
        }
        let partition = dirichlet_partition(
            &pools,
            config.clients,
            config.partition.alpha,
            config.partition.threshold,
            &mut Rng::stream(seed, &[streams::PARTITION]),
        )?;

        let mut by_client: BTreeMap<ClientId, Vec<Shard>> = BTreeMap::new();
        for shard in &partition.shards {
            by_client.entry(shard.client_id).or_default().push(shard.clone());
        }
        // Clients that drew no data at all take no part in training.
        let clients = by_client
            .into_iter()
            .map(|(id, shards)| match config.method {
                Method::FlTac => init_client(id, shards, &init),
                Method::SingleAdapter => init_client(id, vec![pool_shards(id, shards)?], &init),
            })
            .collect::<Result<Vec<_>>>()?;

        let clusters = match config.method {
            Method::FlTac => config.task_count(),
            Method::SingleAdapter => 1,
        };
        let server = Server::new(layout.clone(), clusters, config.kmeans, config.weighted_aggregation)?;
        let task_globals = config.tasks.iter().map(|t| (t.task_id, init.clone())).collect();
        Ok(Self {
            config: config.clone(),
            training: config.local_training(),
            model,
            layout,
            partition,
            clients,
            server,
            heldout,
            task_globals,
            cumulative_bytes: 0,
            next_round: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        })
    }

    /// Bounds client-side parallelism. Results do not depend on it.
    pub fn set_threads(&mut self, threads: usize) -> Result<()> {
        if threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            self.pool = Some(pool);
        }
        Ok(())
    }

    pub fn set_training(&mut self, training: LocalTraining) {
        self.training = training;
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &BaseModel {
        &self.model
    }

    pub fn layout(&self) -> &AdapterLayout {
        &self.layout
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn heldout(&self) -> &[TaskPool] {
        &self.heldout
    }

    /// Latest global adapter matched to each task by the evaluator.
    pub fn task_globals(&self) -> &BTreeMap<TaskId, Adapter> {
        &self.task_globals
    }

    pub fn rounds_done(&self) -> u32 {
        self.next_round - 1
    }

    fn finetune(&self, selected: &[usize], round: u32) -> Result<Vec<ClientState>> {
        let seed = self.config.seed;
        let work = |&i: &usize| self.clients[i].local_finetune(&self.model, &self.training, seed, round);
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| selected.par_iter().map(work).collect());
        }
        selected.iter().map(work).collect()
    }

    /// Runs one round. On error no client, server, or evaluator state
    /// changes.
    pub fn step(&mut self) -> Result<RoundOutput> {
        let round = self.next_round;
        let seed = self.config.seed;
        let ids: Vec<ClientId> = self.clients.iter().map(ClientState::client_id).collect();
        let chosen = select_clients(&ids, self.config.participation, &mut Rng::stream(seed, &[streams::SELECT, round as u64]))?;
        let selected: Vec<usize> = chosen.iter().map(|id| ids.binary_search(id).expect("selected from ids")).collect();

        let mut trained = self.finetune(&selected, round)?;
        let mut uploads = Vec::new();
        let mut truth = BTreeMap::new();
        let mut per_client = Vec::with_capacity(trained.len());
        for state in &mut trained {
            let batch = state.upload(seed, round);
            per_client.push(batch.len());
            uploads.extend(batch);
            truth.extend(state.truth());
        }
        let set = UploadSet::new(round, uploads)?;

        let bpp = self.config.bytes_per_param;
        let bytes_up = comm_bytes(&per_client, self.layout.param_count(), bpp);
        let moved: u64 = set.entries().iter().map(|u| (u.vector.len() * bpp) as u64).sum();
        if moved != bytes_up {
            return Err(Error::Protocol(format!("round {round}: accounted {bytes_up} bytes up but moved {moved}")));
        }

        let clustering = match self.config.method {
            Method::FlTac => self.server.cluster(&set, &mut Rng::stream(seed, &[streams::KMEANS, round as u64]))?,
            Method::SingleAdapter => {
                Clustering { k: 1, assignment: vec![0; set.len()], centroids: Vec::new(), inertia: 0.0, trace: Vec::new() }
            }
        };
        let aggregation = self.server.aggregate(&set, &clustering)?;
        let updated = trained.iter().map(|s| s.receive(&aggregation.writebacks)).collect::<Result<Vec<_>>>()?;
        let bytes_down: u64 = set
            .entries()
            .iter()
            .map(|u| (aggregation.writebacks[&u.handle].flatten().len() * bpp) as u64)
            .sum();

        // Evaluation side: the only place truth is joined to server output.
        let assignment: BTreeMap<Handle, usize> =
            set.entries().iter().zip(&clustering.assignment).map(|(u, &c)| (u.handle, c)).collect();
        let mut task_globals = self.task_globals.clone();
        let (accuracy, purity_score, inertia) = match self.config.method {
            Method::FlTac => {
                let n = self.config.task_count();
                for (cluster, task) in cluster_to_task(&assignment, &truth, n)?.into_iter().enumerate() {
                    if let Some(task) = task {
                        task_globals.insert(task, aggregation.globals[cluster].clone());
                    }
                }
                (Some(cluster_accuracy(&assignment, &truth, n)?), Some(purity(&assignment, &truth)?), Some(clustering.inertia))
            }
            Method::SingleAdapter => {
                for g in task_globals.values_mut() {
                    *g = aggregation.globals[0].clone();
                }
                (None, None, None)
            }
        };
        let loss_kind = self.training.loss;
        let per_task_eval_loss = self
            .heldout
            .iter()
            .map(|pool| Ok((pool.task_id, eval_task_loss(&self.model, &task_globals[&pool.task_id], pool, loss_kind)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        if let Some((task, l)) = per_task_eval_loss.iter().find(|(_, l)| !l.is_finite()) {
            return Err(Error::Numeric(format!("round {round}: held-out loss of task {task} is {l}")));
        }

        let projections = if set.len() >= 2 { project_2d(&set.vectors())? } else { vec![(0.0, 0.0); set.len()] };
        let points = set
            .entries()
            .iter()
            .zip(&clustering.assignment)
            .zip(projections)
            .map(|((u, &c), p)| EvalPoint { upload: u.clone(), true_task: truth[&u.handle], cluster: c, projection: p })
            .collect();

        let cumulative_bytes = self.cumulative_bytes + bytes_up + bytes_down;
        let record = RoundRecord {
            round,
            per_task_eval_loss,
            cluster_accuracy: accuracy,
            purity: purity_score,
            inertia,
            bytes_up,
            bytes_down,
            cumulative_bytes,
        };
        let ledger = LedgerEntry {
            round,
            selected: chosen,
            uploads: set.len(),
            cluster_sizes: clustering.sizes(),
            inertia: matches!(self.config.method, Method::FlTac).then_some(clustering.inertia),
            aggregate_norms: aggregation.globals.iter().map(|g| g.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()).collect(),
            bytes_up,
            bytes_down,
        };

        // Commit.
        for (slot, state) in selected.into_iter().zip(updated) {
            self.clients[slot] = state;
        }
        self.server.commit(aggregation.globals.clone());
        self.task_globals = task_globals;
        self.cumulative_bytes = cumulative_bytes;
        self.next_round += 1;
        Ok(RoundOutput { record, ledger, points, globals: aggregation.globals })
    }

    /// Runs all configured rounds, handing each output to `sink` as soon as
    /// it is committed.
    pub fn run(&mut self, mut sink: impl FnMut(&RoundOutput) -> Result<()>) -> Result<()> {
        while self.next_round <= self.config.rounds {
            let out = self.step()?;
            sink(&out)?;
        }
        Ok(())
    }
}
