//! LoRA factor pairs, the shared/private dual adapter, and frozen backbone layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdapterError {
    #[error("adapter rank must be at least 1")]
    ZeroRank,
    #[error("factor shapes inconsistent: a is {a:?}, b is {b:?}")]
    FactorShape {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("shared and private modules disagree on layer shape: {shared:?} vs {private:?}")]
    DualShape {
        shared: (usize, usize),
        private: (usize, usize),
    },
    #[error("malformed factor pair encoding: {0}")]
    Decode(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One low-rank factorisation `ΔW = B·A` with `A: r×d_in` and `B: d_out×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    a: Matrix,
    b: Matrix,
}

impl FactorPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self, AdapterError> {
        if a.rows() == 0 {
            return Err(AdapterError::ZeroRank);
        }
        if a.rows() != b.cols() {
            return Err(AdapterError::FactorShape {
                a: a.shape(),
                b: b.shape(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn zeros(d_out: usize, d_in: usize, rank: usize) -> Self {
        assert!(rank >= 1, "rank must be at least 1");
        Self {
            a: Matrix::zeros(rank, d_in),
            b: Matrix::zeros(d_out, rank),
        }
    }

    /// Standard LoRA initialisation: `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(d_out: usize, d_in: usize, rank: usize, rng: &mut R) -> Self {
        assert!(rank >= 1, "rank must be at least 1");
        let normal = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("valid std");
        let a = Matrix::from_fn(rank, d_in, |_, _| normal.sample(rng));
        Self {
            a,
            b: Matrix::zeros(d_out, rank),
        }
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn layer_shape(&self) -> (usize, usize) {
        (self.d_out(), self.d_in())
    }

    pub fn num_params(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }

    /// `B·A`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("factor pair invariant")
    }

    /// Concatenates pairs along the rank dimension, in the given order.
    pub fn concat(parts: &[&FactorPair]) -> Result<FactorPair, AdapterError> {
        let a_parts: Vec<&Matrix> = parts.iter().map(|p| &p.a).collect();
        let b_parts: Vec<&Matrix> = parts.iter().map(|p| &p.b).collect();
        FactorPair::new(Matrix::vstack(&a_parts)?, Matrix::hstack(&b_parts)?)
    }

    /// Components `start..end` along the rank dimension.
    pub fn rank_slice(&self, start: usize, end: usize) -> FactorPair {
        FactorPair {
            a: self.a.row_range(start, end),
            b: self.b.col_range(start, end),
        }
    }

    /// Zero-pads along the rank dimension up to `rank`.
    pub fn pad_to_rank(&self, rank: usize) -> FactorPair {
        FactorPair {
            a: self.a.pad_rows(rank),
            b: self.b.pad_cols(rank),
        }
    }

    /// Little-endian encoding: `rank, d_out, d_in` as u64, then `b` then `a` row-major as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.num_params());
        for dim in [self.rank(), self.d_out(), self.d_in()] {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in self.b.data().iter().chain(self.a.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one pair from the front of `bytes`; returns it with the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(FactorPair, usize), AdapterError> {
        let read_u64 = |at: usize| -> Result<u64, AdapterError> {
            bytes
                .get(at..at + 8)
                .map(|s| u64::from_le_bytes(s.try_into().expect("8 bytes")))
                .ok_or(AdapterError::Decode("truncated header"))
        };
        let rank = usize::try_from(read_u64(0)?).map_err(|_| AdapterError::Decode("rank"))?;
        let d_out = usize::try_from(read_u64(8)?).map_err(|_| AdapterError::Decode("d_out"))?;
        let d_in = usize::try_from(read_u64(16)?).map_err(|_| AdapterError::Decode("d_in"))?;
        let b_len = d_out
            .checked_mul(rank)
            .ok_or(AdapterError::Decode("size overflow"))?;
        let a_len = rank
            .checked_mul(d_in)
            .ok_or(AdapterError::Decode("size overflow"))?;
        let total = 24 + 8 * (a_len + b_len);
        let body = bytes
            .get(24..total)
            .ok_or(AdapterError::Decode("truncated body"))?;
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let b: Vec<f64> = values.by_ref().take(b_len).collect();
        let a: Vec<f64> = values.collect();
        let pair = FactorPair::new(
            Matrix::from_vec(rank, d_in, a)?,
            Matrix::from_vec(d_out, rank, b)?,
        )?;
        Ok((pair, total))
    }
}

/// Shared plus private low-rank modules attached to one adapted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DualAdapter {
    pub layer_id: usize,
    pub shared: FactorPair,
    pub private: FactorPair,
}

impl DualAdapter {
    pub fn new(
        layer_id: usize,
        shared: FactorPair,
        private: FactorPair,
    ) -> Result<Self, AdapterError> {
        if shared.layer_shape() != private.layer_shape() {
            return Err(AdapterError::DualShape {
                shared: shared.layer_shape(),
                private: private.layer_shape(),
            });
        }
        Ok(Self {
            layer_id,
            shared,
            private,
        })
    }

    pub fn layer_shape(&self) -> (usize, usize) {
        self.shared.layer_shape()
    }

    /// Shared and private concatenated into one pair (shared components first).
    pub fn monolithic(&self) -> FactorPair {
        FactorPair::concat(&[&self.shared, &self.private]).expect("dual adapter invariant")
    }
}

/// `shared.delta() + private.delta()`.
pub fn dual_delta(d: &DualAdapter) -> Result<Matrix, AdapterError> {
    let mut out = d.shared.delta();
    out.add_assign(&d.private.delta())?;
    Ok(out)
}

/// Initialises a dual adapter deterministically from `seed`.
pub fn init_adapter(
    d_out: usize,
    d_in: usize,
    r_shared: usize,
    r_private: usize,
    seed: u64,
) -> DualAdapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_adapter_with(0, d_out, d_in, r_shared, r_private, &mut rng)
}

pub fn init_adapter_with<R: Rng + ?Sized>(
    layer_id: usize,
    d_out: usize,
    d_in: usize,
    r_shared: usize,
    r_private: usize,
    rng: &mut R,
) -> DualAdapter {
    let shared = FactorPair::init(d_out, d_in, r_shared, rng);
    let private = FactorPair::init(d_out, d_in, r_private, rng);
    DualAdapter {
        layer_id,
        shared,
        private,
    }
}

/// A backbone layer whose weights never change, plus its adapter.
///
/// `merged` holds a dense delta folded in by the server (FLoRA-style baselines); it is zero
/// otherwise. `scale` multiplies the adapter delta and defaults to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLayer {
    w: Matrix,
    pub merged: Matrix,
    pub adapter: DualAdapter,
    pub scale: f64,
}

impl FrozenLayer {
    pub fn new(w: Matrix, adapter: DualAdapter) -> Result<Self, AdapterError> {
        if w.shape() != adapter.layer_shape() {
            return Err(AdapterError::DualShape {
                shared: adapter.layer_shape(),
                private: w.shape(),
            });
        }
        let merged = Matrix::zeros(w.rows(), w.cols());
        Ok(Self {
            w,
            merged,
            adapter,
            scale: 1.0,
        })
    }

    /// The frozen backbone weights.
    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }
}

/// `w + merged + scale · dual_delta(adapter)`.
pub fn effective_weight(l: &FrozenLayer) -> Result<Matrix, AdapterError> {
    let mut out = l.w.add(&l.merged)?;
    out.axpy(l.scale, &dual_delta(&l.adapter)?)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::svd;

    fn random_pair(d_out: usize, d_in: usize, rank: usize, seed: u64) -> FactorPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(rank, d_in, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(d_out, rank, |_, _| rng.random_range(-1.0..1.0));
        FactorPair::new(a, b).unwrap()
    }

    fn dense_product(b: &Matrix, a: &Matrix) -> Matrix {
        Matrix::from_fn(b.rows(), a.cols(), |i, j| {
            (0..a.rows()).map(|k| b.get(i, k) * a.get(k, j)).sum()
        })
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(FactorPair::init(4, 3, 2, &mut rng).delta().is_zero());
    }

    #[test]
    fn hand_outer_product() {
        let p = FactorPair::new(
            Matrix::from_rows(&[[0.0, 2.0]]),
            Matrix::from_rows(&[[1.0], [0.0]]),
        )
        .unwrap();
        assert_eq!(p.delta(), Matrix::from_rows(&[[0.0, 2.0], [0.0, 0.0]]));
    }

    #[test]
    fn delta_matches_dense_oracle() {
        let p = random_pair(5, 4, 3, 1);
        let oracle = dense_product(p.b(), p.a());
        assert!(p.delta().max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn dual_delta_degenerate_and_random() {
        let shared = random_pair(4, 6, 2, 3);
        let private = random_pair(4, 6, 3, 4);
        let zero_private = DualAdapter::new(0, shared.clone(), FactorPair::zeros(4, 6, 3)).unwrap();
        assert_eq!(dual_delta(&zero_private).unwrap(), shared.delta());
        let zero_shared = DualAdapter::new(0, FactorPair::zeros(4, 6, 2), private.clone()).unwrap();
        assert_eq!(dual_delta(&zero_shared).unwrap(), private.delta());

        let both = DualAdapter::new(0, shared.clone(), private.clone()).unwrap();
        let oracle = dense_product(shared.b(), shared.a())
            .add(&dense_product(private.b(), private.a()))
            .unwrap();
        assert!(dual_delta(&both).unwrap().max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn dual_rejects_shape_mismatch() {
        let err = DualAdapter::new(0, FactorPair::zeros(4, 3, 1), FactorPair::zeros(3, 4, 1));
        assert!(matches!(err, Err(AdapterError::DualShape { .. })));
        let err = FactorPair::new(Matrix::zeros(2, 3), Matrix::zeros(4, 3));
        assert!(matches!(err, Err(AdapterError::FactorShape { .. })));
    }

    #[test]
    fn effective_weight_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Matrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let zero = DualAdapter::new(0, FactorPair::zeros(3, 5, 2), FactorPair::zeros(3, 5, 2)).unwrap();
        let layer = FrozenLayer::new(w.clone(), zero).unwrap();
        assert_eq!(effective_weight(&layer).unwrap(), w);

        let adapter = DualAdapter::new(0, random_pair(3, 5, 2, 9), random_pair(3, 5, 1, 10)).unwrap();
        let layer = FrozenLayer::new(Matrix::zeros(3, 5), adapter.clone()).unwrap();
        assert_eq!(effective_weight(&layer).unwrap(), dual_delta(&adapter).unwrap());

        let layer = FrozenLayer::new(w.clone(), adapter.clone()).unwrap();
        let oracle = Matrix::from_fn(3, 5, |i, j| {
            w.get(i, j)
                + dense_product(adapter.shared.b(), adapter.shared.a()).get(i, j)
                + dense_product(adapter.private.b(), adapter.private.a()).get(i, j)
        });
        assert!(effective_weight(&layer).unwrap().max_abs_diff(&oracle) <= 1e-12);
        assert_eq!(layer.w(), &w);
    }

    #[test]
    fn init_is_deterministic_and_zero_delta() {
        let x = init_adapter(6, 4, 3, 2, 17);
        let y = init_adapter(6, 4, 3, 2, 17);
        let z = init_adapter(6, 4, 3, 2, 18);
        assert!(dual_delta(&x).unwrap().is_zero());
        assert_eq!(x.shared.to_bytes(), y.shared.to_bytes());
        assert_eq!(x.private.to_bytes(), y.private.to_bytes());
        assert_ne!(x.shared.a().data(), z.shared.a().data());
        assert_ne!(x.shared.to_bytes(), z.shared.to_bytes());
    }

    #[test]
    fn delta_rank_is_bounded_by_factor_rank() {
        for seed in 0..10 {
            let p = random_pair(8, 7, 3, seed);
            let s = svd(&p.delta()).unwrap();
            assert!(s.singular_values.iter().filter(|v| **v > 1e-10).count() <= 3);
        }
    }

    #[test]
    fn decode_rejects_truncation() {
        let bytes = random_pair(3, 2, 2, 5).to_bytes();
        assert!(FactorPair::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(FactorPair::from_bytes(&bytes[..10]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encoding_round_trips(d_out in 1usize..6, d_in in 1usize..6, rank in 1usize..5, seed: u64) {
                let p = random_pair(d_out, d_in, rank, seed);
                let mut bytes = p.to_bytes();
                bytes.extend_from_slice(&[0xAB; 3]);
                let (back, used) = FactorPair::from_bytes(&bytes).unwrap();
                prop_assert_eq!(used, bytes.len() - 3);
                prop_assert_eq!(back, p);
            }
        }
    }
}
