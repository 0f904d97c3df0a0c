use std::borrow::Borrow;

use super::{
    by_layer, stack, AggregationConfig, AggregationError, AggregationStrategy, Broadcast,
    PayloadScope, StrategyState,
};
use crate::adapters::FactorPair;
use crate::tensor::Matrix;

/// Stacks whole client adapters, forms the dense weighted delta and adds it to `accumulator`.
/// Returns the updated accumulator.
pub fn aggregate_flora<P: Borrow<FactorPair>>(
    full_adapters: &[P],
    weights: &[f64],
    accumulator: &Matrix,
) -> Result<Matrix, AggregationError> {
    let stacked = stack(full_adapters, weights)?;
    Ok(accumulator.add(&stacked.delta())?)
}

/// FLoRA-style monolithic stacking. The aggregate is folded into a server-side dense
/// accumulator and clients start every round from freshly initialised adapters.
#[derive(Clone, Copy, Debug, Default)]
pub struct FloraStacking;

impl AggregationStrategy for FloraStacking {
    fn name(&self) -> &'static str {
        "flora_stacking"
    }

    fn payload_scope(&self) -> PayloadScope {
        PayloadScope::FullAdapter
    }

    fn aggregate(
        &self,
        uploads: &[Vec<FactorPair>],
        config: &AggregationConfig,
        state: &mut StrategyState,
    ) -> Result<Broadcast, AggregationError> {
        config.validate(uploads.len())?;
        let layers = by_layer(uploads)?;
        if state.accumulators.is_empty() {
            state.accumulators = layers
                .iter()
                .map(|pairs| {
                    let (d_out, d_in) = pairs[0].layer_shape();
                    Matrix::zeros(d_out, d_in)
                })
                .collect();
        }
        if state.accumulators.len() != layers.len() {
            return Err(AggregationError::LayerCount);
        }
        let next = layers
            .iter()
            .zip(&state.accumulators)
            .map(|(pairs, acc)| aggregate_flora(pairs, &config.weights, acc))
            .collect::<Result<Vec<_>, _>>()?;
        state.accumulators = next.clone();
        Ok(Broadcast::Merged(next))
    }
}
