use std::borrow::Borrow;

use super::{
    by_layer, check_layer_shapes, validate_weights, AggregationConfig, AggregationError,
    AggregationStrategy, Broadcast, PayloadScope, SharedModuleUpdate, StrategyState,
};
use crate::adapters::FactorPair;
use crate::tensor::{svd, truncate_svd, Matrix};

/// Concatenates client factors along the rank dimension in the given (ascending id) order.
///
/// Only `B_k` is scaled by `p_k`, so the stacked product is exactly `Σ_k p_k B_k A_k`.
pub fn stack<P: Borrow<FactorPair>>(
    pairs: &[P],
    weights: &[f64],
) -> Result<FactorPair, AggregationError> {
    let refs: Vec<&FactorPair> = pairs.iter().map(Borrow::borrow).collect();
    check_layer_shapes(&refs)?;
    validate_weights(weights, refs.len())?;
    let scaled_b: Vec<Matrix> = refs
        .iter()
        .zip(weights)
        .map(|(p, w)| p.b().scale(*w))
        .collect();
    let a_parts: Vec<&Matrix> = refs.iter().map(|p| p.a()).collect();
    let b_parts: Vec<&Matrix> = scaled_b.iter().collect();
    Ok(FactorPair::new(
        Matrix::vstack(&a_parts)?,
        Matrix::hstack(&b_parts)?,
    )?)
}

/// Best rank-`r_max` factorisation of `delta` with `Σ^{1/2}` split evenly between the factors.
///
/// The returned rank is `min(r_max, numerical rank)`, floored at 1 so a zero delta still yields
/// a (zero) pair.
pub fn recompress(delta: &Matrix, r_max: usize) -> Result<FactorPair, AggregationError> {
    if r_max == 0 {
        return Err(AggregationError::ZeroBudget);
    }
    let full = svd(delta)?;
    let keep = r_max.min(full.numerical_rank()).max(1);
    let t = truncate_svd(&full, keep);
    let roots: Vec<f64> = t.singular_values.iter().map(|s| s.sqrt()).collect();
    let b = Matrix::from_fn(t.u.rows(), keep, |i, j| t.u.get(i, j) * roots[j]);
    let a = Matrix::from_fn(keep, t.v_t.cols(), |i, j| roots[i] * t.v_t.get(i, j));
    Ok(FactorPair::new(a, b)?)
}

/// Stacks one layer and re-compresses to `budget` iff the structural stacked rank exceeds it.
pub fn select_layer<P: Borrow<FactorPair>>(
    pairs: &[P],
    weights: &[f64],
    budget: usize,
) -> Result<FactorPair, AggregationError> {
    let stacked = stack(pairs, weights)?;
    if stacked.rank() > budget {
        recompress(&stacked.delta(), budget)
    } else {
        Ok(stacked)
    }
}

/// Selective stacking over the shared modules of every client, per layer.
///
/// `shared_updates[client][layer]` must already be sorted by client id.
pub fn aggregate_selective(
    shared_updates: &[Vec<FactorPair>],
    config: &AggregationConfig,
    round: usize,
) -> Result<SharedModuleUpdate, AggregationError> {
    config.validate(shared_updates.len())?;
    let layers = by_layer(shared_updates)?
        .into_iter()
        .map(|pairs| {
            let (d_out, d_in) = check_layer_shapes(&pairs)?;
            let budget = if config.recompress {
                config.rank_budget
            } else {
                d_out.min(d_in)
            };
            select_layer(&pairs, &config.weights, budget)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SharedModuleUpdate { round, layers })
}

/// Stacking restricted to shared modules, with rank-budget re-compression.
#[derive(Clone, Copy, Debug, Default)]
pub struct SelectiveStacking;

impl AggregationStrategy for SelectiveStacking {
    fn name(&self) -> &'static str {
        "selective_stacking"
    }

    fn payload_scope(&self) -> PayloadScope {
        PayloadScope::SharedOnly
    }

    fn aggregate(
        &self,
        uploads: &[Vec<FactorPair>],
        config: &AggregationConfig,
        _state: &mut StrategyState,
    ) -> Result<Broadcast, AggregationError> {
        aggregate_selective(uploads, config, 0).map(|u| Broadcast::Shared(u.layers))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{dense_weighted_sum, random_pair};
    use super::*;

    fn best_rank_r(m: &Matrix, r: usize) -> Matrix {
        let na = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        let s = na.svd(true, true);
        let mut sv = s.singular_values.clone();
        for i in r..sv.len() {
            sv[i] = 0.0;
        }
        let rebuilt = s.u.unwrap() * nalgebra::DMatrix::from_diagonal(&sv) * s.v_t.unwrap();
        Matrix::from_fn(m.rows(), m.cols(), |i, j| rebuilt[(i, j)])
    }

    fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
        let na = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        let mut v: Vec<f64> = na.singular_values().iter().copied().collect();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v
    }

    #[test]
    fn two_orthogonal_rank_one_clients() {
        let p1 = FactorPair::new(
            Matrix::from_rows(&[[1.0, 0.0]]),
            Matrix::from_rows(&[[1.0], [0.0]]),
        )
        .unwrap();
        let p2 = FactorPair::new(
            Matrix::from_rows(&[[0.0, 1.0]]),
            Matrix::from_rows(&[[0.0], [1.0]]),
        )
        .unwrap();
        let s = stack(&[p1, p2], &[0.5, 0.5]).unwrap();
        assert_eq!(s.rank(), 2);
        assert_eq!(s.delta(), Matrix::identity(2).scale(0.5));
    }

    #[test]
    fn singleton_federation() {
        let p = random_pair(4, 3, 2, 1);
        let s = stack(&[p.clone()], &[1.0]).unwrap();
        assert_eq!(s.delta(), p.delta());
    }

    #[test]
    fn mixed_ranks_match_dense_oracle() {
        let pairs: Vec<FactorPair> = (1..=3).map(|r| random_pair(5, 7, r, r as u64)).collect();
        let w = [0.2, 0.5, 0.3];
        let s = stack(&pairs, &w).unwrap();
        assert_eq!(s.rank(), 6);
        assert!(s.delta().max_abs_diff(&dense_weighted_sum(&pairs, &w)) <= 1e-12);
    }

    #[test]
    fn stack_rejects_bad_input() {
        let empty: Vec<FactorPair> = Vec::new();
        assert_eq!(stack(&empty, &[]), Err(AggregationError::Empty));
        let res = stack(&[random_pair(3, 3, 1, 0), random_pair(3, 4, 1, 1)], &[0.5, 0.5]);
        assert!(matches!(res, Err(AggregationError::LayerShape { .. })));
    }

    #[test]
    fn recompress_lossless_when_rank_fits() {
        let p = random_pair(6, 5, 2, 4);
        let r = recompress(&p.delta(), 3).unwrap();
        assert_eq!(r.rank(), 2);
        assert!(r.delta().max_abs_diff(&p.delta()) <= 1e-8);
    }

    #[test]
    fn recompress_diagonal() {
        let r = recompress(&Matrix::from_diag(&[3.0, 1.0]), 1).unwrap();
        assert!(r.delta().max_abs_diff(&Matrix::from_diag(&[3.0, 0.0])) <= 1e-12);
    }

    #[test]
    fn recompress_random_matches_tail_and_balances() {
        let m = random_pair(10, 10, 10, 99).delta();
        let r = recompress(&m, 4).unwrap();
        assert_eq!(r.rank(), 4);
        let err = r.delta().sub(&m).unwrap().frobenius_norm();
        let tail: f64 = oracle_singular_values(&m)[4..]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((err - tail).abs() <= 1e-8);
        let btb = r.b().transpose().matmul(r.b()).unwrap();
        let aat = r.a().matmul(&r.a().transpose()).unwrap();
        assert!(btb.max_abs_diff(&aat) <= 1e-10);
    }

    #[test]
    fn recompress_zero_delta_gives_rank_one_zero_pair() {
        let r = recompress(&Matrix::zeros(3, 4), 2).unwrap();
        assert_eq!(r.rank(), 1);
        assert!(r.delta().is_zero());
    }

    #[test]
    fn selective_below_budget_is_exact() {
        let pairs: Vec<Vec<FactorPair>> = (0..3).map(|k| vec![random_pair(6, 8, 1, k)]).collect();
        let w = vec![0.3, 0.3, 0.4];
        let cfg = AggregationConfig::new("selective_stacking", w.clone(), 4);
        let out = aggregate_selective(&pairs, &cfg, 7).unwrap();
        assert_eq!(out.round, 7);
        let flat: Vec<FactorPair> = pairs.iter().map(|p| p[0].clone()).collect();
        assert!(out.layers[0].delta().max_abs_diff(&dense_weighted_sum(&flat, &w)) <= 1e-10);
        assert_eq!(out.layers[0].rank(), 3);
    }

    #[test]
    fn selective_above_budget_is_best_approximation() {
        let pairs: Vec<Vec<FactorPair>> = (0..4).map(|k| vec![random_pair(8, 6, 2, 10 + k)]).collect();
        let w = vec![0.1, 0.2, 0.3, 0.4];
        let cfg = AggregationConfig::new("selective_stacking", w.clone(), 3);
        let out = aggregate_selective(&pairs, &cfg, 0).unwrap();
        assert!(out.layers[0].rank() <= 3);
        let flat: Vec<FactorPair> = pairs.iter().map(|p| p[0].clone()).collect();
        let oracle = best_rank_r(&dense_weighted_sum(&flat, &w), 3);
        assert!(out.layers[0].delta().max_abs_diff(&oracle) <= 1e-8);
    }

    #[test]
    fn consensus_returns_common_delta() {
        let p = random_pair(5, 5, 3, 2);
        let uploads = vec![vec![p.clone()]; 4];
        let cfg = AggregationConfig::new("selective_stacking", vec![0.25; 4], 3);
        let out = aggregate_selective(&uploads, &cfg, 0).unwrap();
        assert!(out.layers[0].delta().max_abs_diff(&p.delta()) <= 1e-8);
    }

    #[test]
    fn unconstrained_mode_keeps_everything_up_to_full_rank() {
        let pairs: Vec<Vec<FactorPair>> = (0..4).map(|k| vec![random_pair(5, 4, 3, k)]).collect();
        let w = vec![0.25; 4];
        let mut cfg = AggregationConfig::new("selective_stacking", w.clone(), 1);
        cfg.recompress = false;
        let out = aggregate_selective(&pairs, &cfg, 0).unwrap();
        assert!(out.layers[0].rank() <= 4);
        let flat: Vec<FactorPair> = pairs.iter().map(|p| p[0].clone()).collect();
        assert!(out.layers[0].delta().max_abs_diff(&dense_weighted_sum(&flat, &w)) <= 1e-8);
    }

    #[test]
    fn homogeneous_ranks_reduce_to_weighted_sum() {
        let pairs: Vec<FactorPair> = (0..3).map(|k| random_pair(9, 9, 2, 40 + k)).collect();
        let w = [0.5, 0.25, 0.25];
        let out = select_layer(&pairs, &w, 6).unwrap();
        assert_eq!(out.delta(), stack(&pairs, &w).unwrap().delta());
        assert!(out.delta().max_abs_diff(&dense_weighted_sum(&pairs, &w)) <= 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn stacking_equivalence(
                ranks in proptest::collection::vec(1usize..=16, 1..=8),
                d_out in 1usize..=12,
                d_in in 1usize..=12,
                raw in proptest::collection::vec(0.01f64..1.0, 8),
                seed: u64,
            ) {
                let pairs: Vec<FactorPair> = ranks
                    .iter()
                    .enumerate()
                    .map(|(k, r)| random_pair(d_out, d_in, *r, seed.wrapping_add(k as u64)))
                    .collect();
                let total: f64 = raw[..ranks.len()].iter().sum();
                let w: Vec<f64> = raw[..ranks.len()].iter().map(|x| x / total).collect();
                let w = renormalize(w);
                let s = stack(&pairs, &w).unwrap();
                let oracle = dense_weighted_sum(&pairs, &w);
                prop_assert_eq!(s.rank(), ranks.iter().sum::<usize>());
                let err = s.delta().sub(&oracle).unwrap().frobenius_norm();
                prop_assert!(err <= 1e-10 * (1.0 + oracle.frobenius_norm()));
            }

            #[test]
            fn budget_is_respected(
                ranks in proptest::collection::vec(1usize..=6, 1..=6),
                budget in 1usize..=8,
                seed: u64,
            ) {
                let uploads: Vec<Vec<FactorPair>> = ranks
                    .iter()
                    .enumerate()
                    .map(|(k, r)| vec![random_pair(7, 9, *r, seed ^ k as u64)])
                    .collect();
                let w = vec![1.0 / ranks.len() as f64; ranks.len()];
                let w = renormalize(w);
                let cfg = AggregationConfig::new("selective_stacking", w, budget);
                let out = aggregate_selective(&uploads, &cfg, 0).unwrap();
                prop_assert!(out.layers[0].rank() <= budget);
            }
        }

        /// Pushes rounding residue into the last weight so the sum check passes.
        fn renormalize(mut w: Vec<f64>) -> Vec<f64> {
            let n = w.len();
            let head: f64 = w[..n - 1].iter().sum();
            w[n - 1] = 1.0 - head;
            w
        }
    }
}
