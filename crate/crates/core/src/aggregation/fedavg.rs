use std::borrow::Borrow;

use super::{
    by_layer, check_layer_shapes, validate_weights, AggregationConfig, AggregationError,
    AggregationStrategy, Broadcast, PayloadScope, StrategyState,
};
use crate::adapters::FactorPair;
use crate::tensor::Matrix;

/// Factor-wise weighted average. Every pair must have the same rank.
pub fn aggregate_fedavg<P: Borrow<FactorPair>>(
    full_adapters: &[P],
    weights: &[f64],
) -> Result<FactorPair, AggregationError> {
    let refs: Vec<&FactorPair> = full_adapters.iter().map(Borrow::borrow).collect();
    let (d_out, d_in) = check_layer_shapes(&refs)?;
    validate_weights(weights, refs.len())?;
    let ranks: Vec<usize> = refs.iter().map(|p| p.rank()).collect();
    FedAvg.check_ranks(&ranks)?;
    let rank = ranks[0];
    let mut a = Matrix::zeros(rank, d_in);
    let mut b = Matrix::zeros(d_out, rank);
    for (p, w) in refs.iter().zip(weights) {
        a.axpy(*w, p.a())?;
        b.axpy(*w, p.b())?;
    }
    Ok(FactorPair::new(a, b)?)
}

/// Homogeneous-rank baseline: plain weighted averaging of LoRA factors.
#[derive(Clone, Copy, Debug, Default)]
pub struct FedAvg;

impl AggregationStrategy for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn payload_scope(&self) -> PayloadScope {
        PayloadScope::FullAdapter
    }

    fn check_ranks(&self, ranks: &[usize]) -> Result<(), AggregationError> {
        match ranks.first() {
            Some(r) if ranks.iter().any(|x| x != r) => Err(AggregationError::HeterogeneousRanks {
                strategy: "fedavg",
                ranks: ranks.to_vec(),
            }),
            _ => Ok(()),
        }
    }

    fn aggregate(
        &self,
        uploads: &[Vec<FactorPair>],
        config: &AggregationConfig,
        _state: &mut StrategyState,
    ) -> Result<Broadcast, AggregationError> {
        config.validate(uploads.len())?;
        let layers = by_layer(uploads)?
            .into_iter()
            .map(|pairs| aggregate_fedavg(&pairs, &config.weights))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Broadcast::Monolithic(layers))
    }
}
