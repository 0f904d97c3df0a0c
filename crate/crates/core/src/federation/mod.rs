//! Round protocol: client local training with dual adapters, selective upload, aggregation and
//! broadcast.

mod client;
mod experiment;
mod optim;
mod server;

pub use client::{ClientRngs, ClientState};
pub use experiment::{
    build_clients, run_experiment, run_experiment_with, write_outputs, ExperimentOutput, MetricsRow, TraceRecord,
    METRICS_COLUMNS,
};
pub use optim::{OptimizerKind, OptimizerState};
pub use server::{effective_rank, run_round, Schedule, ServerState};

use thiserror::Error;

use crate::adapters::AdapterError;
use crate::aggregation::AggregationError;
use crate::privacy::PrivacyError;
use crate::tasks::TaskError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("client {0} has an empty training shard")]
    EmptyShard(usize),
    #[error("broadcast does not match the model layers of client {client}")]
    BroadcastShape { client: usize },
    #[error("expected {expected} layers, got {got}")]
    LayerCount { got: usize, expected: usize },
    #[error("no client participates in round {0}")]
    NoParticipants(usize),
    #[error("client {client} failed in round {round}: {source}")]
    Client {
        client: usize,
        round: usize,
        #[source]
        source: Box<FederationError>,
    },
    #[error("schedule must be a permutation of the client ids")]
    Schedule,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which clients train in a round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Participation {
    All,
    /// `max(1, round(fraction · K))` clients drawn without replacement from the participation stream.
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    pub total_rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub participation: Participation,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            total_rounds: 30,
            local_steps: 10,
            batch_size: 32,
            learning_rate: 0.01,
            optimizer: OptimizerKind::adam(),
            participation: Participation::All,
        }
    }
}

/// Derives an independent stream seed from the global seed, a purpose tag and an index.
pub fn derive_seed(global: u64, stream: u64, index: u64) -> u64 {
    let mut z = global
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    // splitmix64 finaliser
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Purpose tags for [`derive_seed`].
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SHIFT: u64 = 3;
    pub const BACKBONE: u64 = 4;
    pub const PARTICIPATION: u64 = 5;
    pub const CLIENT_DATA: u64 = 10;
    pub const CLIENT_INIT: u64 = 11;
    pub const CLIENT_NOISE: u64 = 12;
    pub const SPLIT: u64 = 13;
}
