//! Labels for derived RNG streams. Every random decision in a run draws from
//! `Rng::stream(seed, &[LABEL, ...])`, so results never depend on the order
//! in which clients are simulated.

pub const MODEL: u64 = 1;
pub const INIT_ADAPTER: u64 = 2;
pub const TRAIN_DATA: u64 = 3;
pub const HELDOUT_DATA: u64 = 4;
pub const PARTITION: u64 = 5;
pub const SELECT: u64 = 6;
pub const LOCAL: u64 = 7;
pub const HANDLE: u64 = 8;
pub const KMEANS: u64 = 9;
pub const TOY: u64 = 10;
