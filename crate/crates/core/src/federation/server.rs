use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ClientState, FederationError, Participation, RoundConfig};
use crate::adapters::FactorPair;
use crate::aggregation::{
    weights_from_sizes, AggregationConfig, AggregationStrategy, Broadcast, StrategyState,
};
use crate::privacy::DpParams;
use crate::tensor::svd;

/// How participating clients are executed within a round.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    /// Rayon work-stealing over all participants.
    Parallel,
    /// One at a time, in the given order of client ids.
    Sequential(Vec<usize>),
}

/// The single logical server.
pub struct ServerState {
    pub round: usize,
    pub strategy: Box<dyn AggregationStrategy>,
    /// Strategy name, rank budget and recompression flag. `weights` is filled per round.
    pub config: AggregationConfig,
    /// Fixed per-client weights indexed by client id; `None` derives them from shard sizes.
    pub weight_override: Option<Vec<f64>>,
    pub state: StrategyState,
    pub last_broadcast: Option<Broadcast>,
    participation_rng: ChaCha8Rng,
}

impl ServerState {
    pub fn new(
        strategy: Box<dyn AggregationStrategy>,
        config: AggregationConfig,
        participation_seed: u64,
    ) -> Self {
        Self {
            round: 0,
            strategy,
            config,
            weight_override: None,
            state: StrategyState::default(),
            last_broadcast: None,
            participation_rng: ChaCha8Rng::seed_from_u64(participation_seed),
        }
    }

    /// Sorted ids of this round's participants.
    pub fn select_participants(&mut self, k: usize, policy: Participation) -> Vec<usize> {
        match policy {
            Participation::All => (0..k).collect(),
            Participation::Fraction(f) => {
                let m = ((f * k as f64).round() as usize).clamp(1, k);
                let mut ids = index::sample(&mut self.participation_rng, k, m).into_vec();
                ids.sort_unstable();
                ids
            }
        }
    }

    fn round_weights(&self, clients: &[ClientState], ids: &[usize]) -> Vec<f64> {
        match &self.weight_override {
            Some(w) => {
                let total: f64 = ids.iter().map(|&i| w[i]).sum();
                ids.iter().map(|&i| w[i] / total).collect()
            }
            None => {
                let sizes: Vec<usize> = ids.iter().map(|&i| clients[i].train.len()).collect();
                weights_from_sizes(&sizes)
            }
        }
    }
}

/// Largest numerical rank over the layers of a broadcast.
pub fn effective_rank(b: &Broadcast) -> Result<usize, FederationError> {
    let mut best = 0;
    for delta in b.layer_deltas() {
        best = best.max(svd(&delta)?.numerical_rank());
    }
    Ok(best)
}

/// Executes one round: local training of the participants, id-sorted aggregation and broadcast
/// to every client. `clients[i].id` must equal `i`.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    rc: &RoundConfig,
    dp: &DpParams,
    schedule: &Schedule,
) -> Result<Broadcast, FederationError> {
    let round = server.round;
    let ids = server.select_participants(clients.len(), rc.participation);
    if ids.is_empty() {
        return Err(FederationError::NoParticipants(round));
    }
    let scope = server.strategy.payload_scope();
    let mut is_participant = vec![false; clients.len()];
    for &i in &ids {
        is_participant[i] = true;
    }

    let mut results: Vec<(usize, Result<Vec<FactorPair>, FederationError>)> = match schedule {
        Schedule::Parallel => clients
            .par_iter_mut()
            .filter(|c| is_participant[c.id])
            .map(|c| (c.id, c.local_train(rc, dp, scope)))
            .collect(),
        Schedule::Sequential(order) => {
            let mut seen = vec![false; clients.len()];
            for &i in order {
                if i >= clients.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(FederationError::Schedule);
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(FederationError::Schedule);
            }
            let mut out = Vec::with_capacity(ids.len());
            for &i in order {
                if is_participant[i] {
                    out.push((i, clients[i].local_train(rc, dp, scope)));
                }
            }
            out
        }
    };
    results.sort_by_key(|(id, _)| *id);

    let mut uploads = Vec::with_capacity(results.len());
    for (id, r) in results {
        match r {
            Ok(payload) => uploads.push(payload),
            Err(e) => {
                return Err(FederationError::Client {
                    client: id,
                    round,
                    source: Box::new(e),
                })
            }
        }
    }

    let ranks: Vec<usize> = uploads.iter().map(|u| u[0].rank()).collect();
    server.strategy.check_ranks(&ranks)?;
    server.config.weights = server.round_weights(clients, &ids);
    let broadcast = server
        .strategy
        .aggregate(&uploads, &server.config, &mut server.state)?;

    for c in clients.iter_mut() {
        c.receive(&broadcast)?;
    }
    server.round += 1;
    server.last_broadcast = Some(broadcast.clone());
    Ok(broadcast)
}
