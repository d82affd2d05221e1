//! Federated fine-tuning with one low-rank adapter per task.
//!
//! Clients train a separate adapter for each of their local tasks on top of a
//! frozen base network. The server never learns which task an upload belongs
//! to: it clusters the uploaded adapter vectors with K-means into one group
//! per task, averages within each group, and writes the averages back.

pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod server;
pub mod simulation;
pub mod streams;
pub mod toy_sim;

pub use error::{Error, Result};
