use std::borrow::Borrow;

use super::{
    by_layer, check_layer_shapes, validate_weights, AggregationConfig, AggregationError,
    AggregationStrategy, Broadcast, PayloadScope, StrategyState,
};
use crate::adapters::FactorPair;
use crate::tensor::Matrix;

/// Zero-pads every pair to the largest client rank, then averages `A` and `B` separately.
pub fn aggregate_zero_padding<P: Borrow<FactorPair>>(
    full_adapters: &[P],
    weights: &[f64],
) -> Result<FactorPair, AggregationError> {
    let refs: Vec<&FactorPair> = full_adapters.iter().map(Borrow::borrow).collect();
    let (d_out, d_in) = check_layer_shapes(&refs)?;
    validate_weights(weights, refs.len())?;
    let max_rank = refs.iter().map(|p| p.rank()).max().unwrap_or(1);
    let mut a = Matrix::zeros(max_rank, d_in);
    let mut b = Matrix::zeros(d_out, max_rank);
    for (p, w) in refs.iter().zip(weights) {
        let padded = p.pad_to_rank(max_rank);
        a.axpy(*w, padded.a())?;
        b.axpy(*w, padded.b())?;
    }
    Ok(FactorPair::new(a, b)?)
}

/// Heterogeneous-rank baseline: pad to the maximum rank, then factor-wise weighted averaging.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPadding;

impl AggregationStrategy for ZeroPadding {
    fn name(&self) -> &'static str {
        "zero_padding"
    }

    fn payload_scope(&self) -> PayloadScope {
        PayloadScope::FullAdapter
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
            .map(|pairs| aggregate_zero_padding(&pairs, &config.weights))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Broadcast::Monolithic(layers))
    }
}
