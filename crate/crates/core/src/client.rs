//! Client side of a round: one adapter per local task, trained only on that
//! task's shard, uploaded under an opaque handle.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{minibatch, ClientId, Shard, TaskId};
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, sgd_step, Adapter, BaseModel, LossKind};
use crate::numeric::Rng;
use crate::streams;

/// Opaque per-upload identifier. Carries no task information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Handle(pub u64);

impl fmt::Display for Handle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// What a client sends to the server for one adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub client_id: ClientId,
    pub handle: Handle,
    /// Shard size, used only by size-weighted aggregation.
    pub sample_count: usize,
    pub vector: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSize {
    /// Every step uses the whole shard in its stored order.
    Full,
    Fixed(usize),
}

impl Serialize for BatchSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Fixed(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("batch_size must be at least 1")),
            Raw::Count(n) => Ok(BatchSize::Fixed(n as usize)),
            Raw::Word(w) if w == "full" => Ok(BatchSize::Full),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("batch_size must be a count or \"full\", got {w:?}"))),
        }
    }
}

/// Local optimizer settings shared by every client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub tau: usize,
    pub eta: f64,
    pub batch: BatchSize,
    pub loss: LossKind,
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Parameter("tau must be at least 1".into()));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Parameter(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Runs `training.tau` gradient steps on one shard. Returns the adapter and
/// the loss observed before each step.
pub fn train_adapter(model: &BaseModel, adapter: &Adapter, shard: &Shard, training: &LocalTraining, rng: &mut Rng) -> Result<(Adapter, Vec<f64>)> {
    training.validate()?;
    let mut current = adapter.clone();
    let mut losses = Vec::with_capacity(training.tau);
    for _ in 0..training.tau {
        let grad = match training.batch {
            BatchSize::Full => loss_and_grad(model, &current, &shard.x, &shard.y, training.loss)?,
            BatchSize::Fixed(b) => {
                let (x, y) = minibatch(shard, b, rng)?;
                loss_and_grad(model, &current, &x, &y, training.loss)?
            }
        };
        losses.push(grad.loss);
        current = sgd_step(&current, &grad, training.eta)?;
    }
    Ok((current, losses))
}

/// One client's shards and task-specific adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    client_id: ClientId,
    shards: BTreeMap<TaskId, Shard>,
    adapters: BTreeMap<TaskId, Adapter>,
    /// Handles issued by the last upload that have not been answered yet.
    pending: BTreeMap<Handle, TaskId>,
}

/// Gives every local task its own copy of the global adapter.
pub fn init_client(client_id: ClientId, shards: Vec<Shard>, global: &Adapter) -> Result<ClientState> {
    if shards.is_empty() {
        return Err(Error::Config(format!("client {client_id} has no data")));
    }
    let mut by_task = BTreeMap::new();
    for shard in shards {
        if shard.client_id != client_id {
            return Err(Error::Config(format!("shard of client {} handed to client {client_id}", shard.client_id)));
        }
        if shard.is_empty() {
            return Err(Error::Config(format!("client {client_id}: empty shard for task {}", shard.task_id)));
        }
        let task = shard.task_id;
        if by_task.insert(task, shard).is_some() {
            return Err(Error::Config(format!("client {client_id}: two shards for task {task}")));
        }
    }
    let adapters = by_task.keys().map(|&t| (t, global.clone())).collect();
    Ok(ClientState { client_id, shards: by_task, adapters, pending: BTreeMap::new() })
}

impl ClientState {
    pub fn client_id(&self) -> ClientId {
        self.client_id
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.shards.keys().copied()
    }

    pub fn task_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, task: TaskId) -> Option<&Shard> {
        self.shards.get(&task)
    }

    pub fn adapter(&self, task: TaskId) -> Option<&Adapter> {
        self.adapters.get(&task)
    }

    pub fn sample_count(&self) -> usize {
        self.shards.values().map(Shard::len).sum()
    }

    /// Trains every local adapter for `tau` steps on its own shard. Each
    /// task draws from its own stream keyed by `(seed, round, client, task)`.
    pub fn local_finetune(&self, model: &BaseModel, training: &LocalTraining, seed: u64, round: u32) -> Result<ClientState> {
        let mut next = self.clone();
        for (task, shard) in &self.shards {
            let mut rng = Rng::stream(seed, &[streams::LOCAL, round as u64, self.client_id.0 as u64, task.0 as u64]);
            let (adapter, _) = train_adapter(model, &self.adapters[task], shard, training, &mut rng)?;
            next.adapters.insert(*task, adapter);
        }
        Ok(next)
    }

    /// Flattens every adapter under a fresh random handle. The handle to task
    /// mapping stays on the client.
    pub fn upload(&mut self, seed: u64, round: u32) -> Vec<Upload> {
        let mut rng = Rng::stream(seed, &[streams::HANDLE, round as u64, self.client_id.0 as u64]);
        self.pending.clear();
        let mut out = Vec::with_capacity(self.adapters.len());
        for (task, adapter) in &self.adapters {
            let mut handle = Handle(rng.next_u64());
            while self.pending.contains_key(&handle) {
                handle = Handle(rng.next_u64());
            }
            self.pending.insert(handle, *task);
            out.push(Upload {
                client_id: self.client_id,
                handle,
                sample_count: self.shards[task].len(),
                vector: adapter.flatten(),
            });
        }
        out
    }

    /// Simulator-side record of which task each outstanding handle belongs
    /// to. Never passed to the server.
    pub fn truth(&self) -> impl Iterator<Item = (Handle, TaskId)> + '_ {
        self.pending.iter().map(|(h, t)| (*h, *t))
    }

    /// Replaces each uploaded adapter with the aggregate the server assigned
    /// to its handle.
    pub fn receive(&self, assignments: &BTreeMap<Handle, Adapter>) -> Result<ClientState> {
        let mut next = self.clone();
        for (handle, task) in &self.pending {
            let adapter = assignments
                .get(handle)
                .ok_or_else(|| Error::Protocol(format!("client {}: no write-back for handle {handle}", self.client_id)))?;
            next.adapters.insert(*task, adapter.clone());
        }
        next.pending.clear();
        Ok(next)
    }
}
