//! One-sided Jacobi (Hestenes) singular value decomposition.
//!
//! The routine is deterministic: the sweep order over column pairs is fixed, singular values are
//! sorted with a stable sort, and signs are normalised so that the first largest-magnitude entry
//! of every left singular vector is non-negative.

use super::{Matrix, TensorError};

/// Relative off-diagonal tolerance for a column pair to be considered orthogonal.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Maximum number of full sweeps before giving up.
pub const MAX_SWEEPS: usize = 100;

/// Thin SVD `m = u · diag(singular_values) · v_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v_t: Matrix,
}

impl SvdResult {
    /// Number of retained components.
    pub fn len(&self) -> usize {
        self.singular_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.singular_values.is_empty()
    }

    /// `u · diag(s) · v_t`.
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.len(), |i, j| {
            self.u.get(i, j) * self.singular_values[j]
        });
        us.matmul(&self.v_t)
            .expect("svd factors have consistent shapes")
    }

    /// Count of singular values above `max(m, n) · ε · σ_max`.
    pub fn numerical_rank(&self) -> usize {
        let dims = self.u.rows().max(self.v_t.cols()) as f64;
        let largest = self.singular_values.first().copied().unwrap_or(0.0);
        let tol = dims * f64::EPSILON * largest;
        self.singular_values.iter().filter(|s| **s > tol).count()
    }
}

/// Computes the thin SVD of `m`. The result carries `min(rows, cols)` components.
pub fn svd(m: &Matrix) -> Result<SvdResult, TensorError> {
    if !m.all_finite() {
        let index = m.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(TensorError::NonFinite { index });
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        // mᵀ = U' S V'ᵀ  =>  m = V' S U'ᵀ
        let t = jacobi_tall(&m.transpose())?;
        let mut out = SvdResult {
            u: t.v_t.transpose(),
            singular_values: t.singular_values,
            v_t: t.u.transpose(),
        };
        normalize_signs(&mut out);
        Ok(out)
    }
}

/// Keeps the leading `min(rank, len)` components.
pub fn truncate_svd(s: &SvdResult, rank: usize) -> SvdResult {
    let keep = rank.min(s.len());
    SvdResult {
        u: s.u.col_range(0, keep),
        singular_values: s.singular_values[..keep].to_vec(),
        v_t: s.v_t.row_range(0, keep),
    }
}

fn jacobi_tall(m: &Matrix) -> Result<SvdResult, TensorError> {
    let rows = m.rows();
    let n = m.cols();
    // Column-major working copies so rotations touch contiguous memory.
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    let mut last_off = 0.0_f64;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(TensorError::SvdNoConvergence {
                sweeps,
                off_diagonal: last_off,
            });
        }
        sweeps += 1;
        let mut rotated = false;
        last_off = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = column_gram(&g[p], &g[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                last_off = last_off.max(off);
                if off <= JACOBI_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let norms: Vec<f64> = g.iter().map(|col| super::l2_norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal values keep their sweep order.
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));

    let largest = order.first().map_or(0.0, |&i| norms[i]);
    let degenerate = (rows.max(n) as f64) * f64::EPSILON * largest;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut v_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        if sigma > degenerate && sigma > 0.0 {
            u_cols.push(g[j].iter().map(|x| x / sigma).collect());
            singular_values.push(sigma);
        } else {
            u_cols.push(complete_basis(&u_cols, rows));
            singular_values.push(0.0);
        }
        v_rows.push(v[j].clone());
    }

    let u = Matrix::from_fn(rows, n, |i, j| u_cols[j][i]);
    let v_t = Matrix::from_fn(n, n, |i, j| v_rows[i][j]);
    let mut out = SvdResult {
        u,
        singular_values,
        v_t,
    };
    normalize_signs(&mut out);
    Ok(out)
}

fn column_gram(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (x, y) in a.iter().zip(b) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Unit vector orthogonal to every column in `basis`, taken from the first standard basis vector
/// that survives two rounds of Gram-Schmidt.
fn complete_basis(basis: &[Vec<f64>], rows: usize) -> Vec<f64> {
    for e in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = super::dot(&cand, b);
                for (c, bi) in cand.iter_mut().zip(b) {
                    *c -= proj * bi;
                }
            }
        }
        let norm = super::l2_norm(&cand);
        if norm > 1e-8 {
            cand.iter_mut().for_each(|c| *c /= norm);
            return cand;
        }
    }
    // Only reachable when basis already spans the space, which cannot happen for a thin SVD.
    vec![0.0; rows]
}

fn normalize_signs(s: &mut SvdResult) {
    let rows = s.u.rows();
    for j in 0..s.len() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..rows {
            let a = s.u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if s.u.get(best, j) < 0.0 {
            for i in 0..rows {
                let x = s.u.get(i, j);
                s.u.set(i, j, -x);
            }
            for k in 0..s.v_t.cols() {
                let x = s.v_t.get(j, k);
                s.v_t.set(j, k, -x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn gram_error(m: &Matrix) -> f64 {
        let g = m.transpose().matmul(m).unwrap();
        g.max_abs_diff(&Matrix::identity(g.rows()))
    }

    /// Symmetric eigenvalues of `mᵀm`, via nalgebra, sorted descending.
    fn gram_eigen_sqrt(m: &Matrix) -> Vec<f64> {
        let na = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        let gram = na.transpose() * &na;
        let eig = nalgebra::SymmetricEigen::new(gram);
        let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        vals
    }

    #[test]
    fn diagonal_input() {
        let s = svd(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 1.0]);
        for m in [&s.u, &s.v_t] {
            for v in m.data() {
                assert!(*v == 0.0 || v.abs() == 1.0);
            }
        }
        assert_eq!(s.u, Matrix::identity(2));
    }

    #[test]
    fn rank_one_outer_product() {
        let b = [1.0, -2.0, 0.5, 3.0];
        let a = [0.3, 0.7, -1.1];
        let m = crate::tensor::outer(&b, &a);
        let s = svd(&m).unwrap();
        let big = s.singular_values.iter().filter(|v| **v > 1e-10).count();
        assert_eq!(big, 1);
        assert_eq!(s.numerical_rank(), 1);
    }

    #[test]
    fn random_tall_matches_gram_oracle() {
        let m = random(6, 4, 42);
        let s = svd(&m).unwrap();
        assert!(s.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-8);
        assert!(gram_error(&s.u) <= 1e-8);
        assert!(gram_error(&s.v_t.transpose()) <= 1e-8);
        for (x, y) in s.singular_values.iter().zip(gram_eigen_sqrt(&m)) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn wide_matrix_is_handled_through_transpose() {
        let m = random(3, 7, 5);
        let s = svd(&m).unwrap();
        assert_eq!(s.u.shape(), (3, 3));
        assert_eq!(s.v_t.shape(), (3, 7));
        assert!(s.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-8);
        assert!(gram_error(&s.v_t.transpose()) <= 1e-8);
    }

    #[test]
    fn zero_and_rank_deficient_inputs_keep_orthonormal_factors() {
        let z = svd(&Matrix::zeros(4, 3)).unwrap();
        assert!(z.singular_values.iter().all(|v| *v == 0.0));
        assert!(gram_error(&z.u) <= 1e-12);

        let m = crate::tensor::outer(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, -1.0]);
        let s = svd(&m).unwrap();
        assert!(gram_error(&s.u) <= 1e-8);
        assert!(s.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-8);
    }

    #[test]
    fn sign_convention_holds() {
        let s = svd(&random(5, 5, 9)).unwrap();
        for j in 0..s.len() {
            let col = s.u.column(j);
            let mut best = 0;
            for i in 0..col.len() {
                if col[i].abs() > col[best].abs() {
                    best = i;
                }
            }
            assert!(col[best] >= 0.0);
        }
    }

    #[test]
    fn truncation_of_diagonal() {
        let s = svd(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        let t = truncate_svd(&s, 1);
        assert_eq!(t.reconstruct(), Matrix::from_diag(&[3.0, 0.0]));
        let err = t
            .reconstruct()
            .sub(&Matrix::from_diag(&[3.0, 1.0]))
            .unwrap()
            .frobenius_norm();
        assert_eq!(err, 1.0);
        assert_eq!(truncate_svd(&s, 5), s);
    }

    #[test]
    fn truncation_error_matches_oracle_tail() {
        let m = random(8, 8, 77);
        let s = svd(&m).unwrap();
        let t = truncate_svd(&s, 3);
        let err = t.reconstruct().sub(&m).unwrap().frobenius_norm();
        let oracle = gram_eigen_sqrt(&m);
        let tail: f64 = oracle[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-8, "{err} vs {tail}");
    }

    #[test]
    fn deterministic_bytes() {
        let m = random(7, 5, 1);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        let bits = |s: &SvdResult| -> Vec<u64> {
            s.u.data()
                .iter()
                .chain(&s.singular_values)
                .chain(s.v_t.data())
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn equal_singular_values_stay_in_order() {
        let s = svd(&Matrix::identity(3).scale(2.0)).unwrap();
        assert_eq!(s.singular_values, vec![2.0, 2.0, 2.0]);
        assert_eq!(s.u, Matrix::identity(3));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix_strategy() -> impl Strategy<Value = Matrix> {
            (1usize..10, 1usize..10).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-5.0f64..5.0, r * c)
                    .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
            })
        }

        proptest! {
            #[test]
            fn reconstruction_and_tail_energy(m in matrix_strategy(), r in 1usize..10) {
                let s = svd(&m).unwrap();
                let scale = m.frobenius_norm().max(1.0);
                prop_assert!(s.reconstruct().sub(&m).unwrap().frobenius_norm() <= 1e-8 * scale);
                for w in s.singular_values.windows(2) {
                    prop_assert!(w[0] >= w[1]);
                }
                let t = truncate_svd(&s, r);
                let err2 = t.reconstruct().sub(&m).unwrap().frobenius_norm().powi(2);
                let tail: f64 = s.singular_values.iter().skip(r).map(|v| v * v).sum();
                prop_assert!((err2 - tail).abs() <= 1e-8 * scale * scale);
            }
        }
    }
}
