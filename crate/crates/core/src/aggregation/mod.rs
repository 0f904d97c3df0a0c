//! Server-side aggregation of client adapters.
//!
//! Every aggregation rule implements [`AggregationStrategy`] and is looked up by name through a
//! [`StrategyRegistry`]. The built-in rules are selective stacking with rank-budget
//! re-compression, zero-padding, FedAvg and FLoRA-style monolithic stacking.

mod fedavg;
mod flora;
mod padding;
mod registry;
mod selective;

pub use fedavg::{aggregate_fedavg, FedAvg};
pub use flora::{aggregate_flora, FloraStacking};
pub use padding::{aggregate_zero_padding, ZeroPadding};
pub use registry::StrategyRegistry;
pub use selective::{aggregate_selective, recompress, select_layer, stack, SelectiveStacking};

use thiserror::Error;

use crate::adapters::{AdapterError, FactorPair};
use crate::tensor::{Matrix, TensorError};

/// Tolerance on `Σ p_k = 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AggregationError {
    #[error("no client updates to aggregate")]
    Empty,
    #[error("{weights} weights supplied for {clients} clients")]
    WeightCount { weights: usize, clients: usize },
    #[error("aggregation weights must be non-negative and sum to 1 (sum = {sum})")]
    InvalidWeights { sum: f64 },
    #[error("rank budget must be at least 1")]
    ZeroBudget,
    #[error("client updates disagree on layer shape: {expected:?} vs {found:?}")]
    LayerShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("clients uploaded different numbers of layers")]
    LayerCount,
    #[error("{strategy} requires homogeneous ranks, got {ranks:?}")]
    HeterogeneousRanks {
        strategy: &'static str,
        ranks: Vec<usize>,
    },
    #[error("unknown aggregation strategy '{0}'")]
    UnknownStrategy(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameters of one aggregation step.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationConfig {
    /// Registered strategy name.
    pub strategy: String,
    /// Per-client weights `p_k`, aligned with the (id-sorted) uploads.
    pub weights: Vec<f64>,
    /// Rank budget `r_max` for the broadcast shared module.
    pub rank_budget: usize,
    /// When false, selective stacking keeps every stacked direction and only re-factorises
    /// losslessly once the stacked rank exceeds the layer's full rank.
    pub recompress: bool,
}

impl AggregationConfig {
    pub fn new(strategy: impl Into<String>, weights: Vec<f64>, rank_budget: usize) -> Self {
        Self {
            strategy: strategy.into(),
            weights,
            rank_budget,
            recompress: true,
        }
    }

    pub fn validate(&self, clients: usize) -> Result<(), AggregationError> {
        if self.rank_budget == 0 {
            return Err(AggregationError::ZeroBudget);
        }
        validate_weights(&self.weights, clients)
    }
}

pub fn validate_weights(weights: &[f64], clients: usize) -> Result<(), AggregationError> {
    if clients == 0 {
        return Err(AggregationError::Empty);
    }
    if weights.len() != clients {
        return Err(AggregationError::WeightCount {
            weights: weights.len(),
            clients,
        });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(AggregationError::InvalidWeights { sum });
    }
    Ok(())
}

/// `p_k = n_k / Σ_j n_j`.
pub fn weights_from_sizes(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|n| *n as f64 / total as f64).collect()
}

/// The broadcast shared module for round `round`, one factor pair per adapted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedModuleUpdate {
    pub round: usize,
    pub layers: Vec<FactorPair>,
}

/// Which part of a client's dual adapter leaves the device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadScope {
    /// Only the shared module; the private module never leaves the client.
    SharedOnly,
    /// Shared and private concatenated into one monolithic adapter.
    FullAdapter,
}

/// What the server sends back, and how clients must apply it.
#[derive(Clone, Debug, PartialEq)]
pub enum Broadcast {
    /// Replaces every client's shared module wholesale.
    Shared(Vec<FactorPair>),
    /// A monolithic adapter per layer; each client keeps its leading components up to its own rank.
    Monolithic(Vec<FactorPair>),
    /// Dense accumulated deltas per layer; clients fold them into the backbone offset and
    /// re-initialise their adapters.
    Merged(Vec<Matrix>),
}

impl Broadcast {
    /// Dense per-layer delta carried by the broadcast.
    pub fn layer_deltas(&self) -> Vec<Matrix> {
        match self {
            Broadcast::Shared(p) | Broadcast::Monolithic(p) => p.iter().map(|p| p.delta()).collect(),
            Broadcast::Merged(m) => m.clone(),
        }
    }
}

/// Server-side memory a strategy may carry across rounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StrategyState {
    /// Dense per-layer accumulator for FLoRA-style stacking; empty until first used.
    pub accumulators: Vec<Matrix>,
}

/// One aggregation rule.
pub trait AggregationStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn payload_scope(&self) -> PayloadScope;

    /// Rejects client rank configurations the rule cannot handle.
    fn check_ranks(&self, _ranks: &[usize]) -> Result<(), AggregationError> {
        Ok(())
    }

    /// Aggregates id-sorted uploads (`uploads[client][layer]`).
    fn aggregate(
        &self,
        uploads: &[Vec<FactorPair>],
        config: &AggregationConfig,
        state: &mut StrategyState,
    ) -> Result<Broadcast, AggregationError>;
}

/// Transposes `uploads[client][layer]` into per-layer lists after checking the layer count.
pub(crate) fn by_layer(uploads: &[Vec<FactorPair>]) -> Result<Vec<Vec<&FactorPair>>, AggregationError> {
    let first = uploads.first().ok_or(AggregationError::Empty)?;
    let layers = first.len();
    if uploads.iter().any(|u| u.len() != layers) {
        return Err(AggregationError::LayerCount);
    }
    Ok((0..layers)
        .map(|l| uploads.iter().map(|u| &u[l]).collect())
        .collect())
}

pub(crate) fn check_layer_shapes(pairs: &[&FactorPair]) -> Result<(usize, usize), AggregationError> {
    let first = pairs.first().ok_or(AggregationError::Empty)?;
    let expected = first.layer_shape();
    for p in pairs {
        if p.layer_shape() != expected {
            return Err(AggregationError::LayerShape {
                expected,
                found: p.layer_shape(),
            });
        }
    }
    Ok(expected)
}
