use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PrivacyError;
use crate::tensor::l2_norm;

/// Which adapter parameters receive clipped, noised gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpScope {
    /// Only the shared module; private gradients stay exact.
    Shared,
    /// Shared and private modules alike.
    Full,
}

/// DP-SGD parameters: clipping norm `C` and noise multiplier `σ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpParams {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub enabled: bool,
    pub scope: DpScope,
}

impl DpParams {
    pub fn disabled() -> Self {
        Self {
            clip_norm: f64::INFINITY,
            noise_multiplier: 0.0,
            enabled: false,
            scope: DpScope::Shared,
        }
    }

    pub fn new(clip_norm: f64, noise_multiplier: f64) -> Self {
        Self {
            clip_norm,
            noise_multiplier,
            enabled: true,
            scope: DpScope::Shared,
        }
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(self.clip_norm > 0.0) {
            return Err(PrivacyError::ClipNorm(self.clip_norm));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(PrivacyError::NoiseMultiplier(self.noise_multiplier));
        }
        if self.noise_multiplier > 0.0 && !self.clip_norm.is_finite() {
            return Err(PrivacyError::UnboundedNoise);
        }
        Ok(())
    }
}

/// Scales `g` by `min(1, C / ‖g‖₂)`.
pub fn clip(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = l2_norm(g);
    if norm > clip_norm {
        let factor = clip_norm / norm;
        g.iter().map(|x| x * factor).collect()
    } else {
        g.to_vec()
    }
}

/// Clips each per-sample gradient, sums, adds `N(0, σ²C²I)` and divides by the batch size.
///
/// With `params.enabled == false` this is the plain mean gradient.
pub fn clip_and_noise<R: Rng + ?Sized>(
    per_sample_grads: &[Vec<f64>],
    params: &DpParams,
    rng: &mut R,
) -> Result<Vec<f64>, PrivacyError> {
    let first = per_sample_grads.first().ok_or(PrivacyError::EmptyBatch)?;
    let dim = first.len();
    if let Some(bad) = per_sample_grads.iter().find(|g| g.len() != dim) {
        return Err(PrivacyError::GradientLength {
            expected: dim,
            found: bad.len(),
        });
    }
    let mut sum = vec![0.0; dim];
    if params.enabled {
        params.validate()?;
        for g in per_sample_grads {
            for (s, x) in sum.iter_mut().zip(clip(g, params.clip_norm)) {
                *s += x;
            }
        }
        if params.noise_multiplier > 0.0 {
            let std = params.noise_multiplier * params.clip_norm;
            for s in sum.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *s += std * z;
            }
        }
    } else {
        for g in per_sample_grads {
            for (s, x) in sum.iter_mut().zip(g) {
                *s += x;
            }
        }
    }
    let n = per_sample_grads.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pure_clipping_halves_long_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = vec![vec![0.0, 4.0, 0.0]];
        let out = clip_and_noise(&g, &DpParams::new(2.0, 0.0), &mut rng).unwrap();
        assert_eq!(out, vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn inactive_clipping_is_plain_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = vec![vec![0.5, -0.5], vec![0.1, 0.3], vec![-0.2, 0.2]];
        let out = clip_and_noise(&g, &DpParams::new(1.0, 0.0), &mut rng).unwrap();
        let mean = [(0.5 + 0.1 - 0.2) / 3.0, (-0.5 + 0.3 + 0.2) / 3.0];
        for (o, m) in out.iter().zip(mean) {
            assert!((o - m).abs() <= 1e-12);
        }
    }

    #[test]
    fn infinite_clip_no_noise_is_exact_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = vec![vec![10.0, -3.0], vec![2.0, 7.0]];
        let params = DpParams::new(f64::INFINITY, 0.0);
        let out = clip_and_noise(&g, &params, &mut rng).unwrap();
        assert_eq!(out, vec![6.0, 2.0]);
    }

    #[test]
    fn noise_std_matches_sigma_times_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let params = DpParams::new(1.0, 1.0);
        let draws = 10_000;
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        for _ in 0..draws {
            let out = clip_and_noise(&[vec![0.0; 3]], &params, &mut rng).unwrap();
            for i in 0..3 {
                sum[i] += out[i];
                sum_sq[i] += out[i] * out[i];
            }
        }
        for i in 0..3 {
            let mean = sum[i] / draws as f64;
            let std = (sum_sq[i] / draws as f64 - mean * mean).sqrt();
            assert!((std - 1.0).abs() <= 0.05, "coordinate {i}: std {std}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let params = DpParams::new(1.0, 0.7);
        let g = vec![vec![3.0, 1.0], vec![0.2, -0.1]];
        let a = clip_and_noise(&g, &params, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = clip_and_noise(&g, &params, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DpParams::new(1.0, 1.0);
        assert_eq!(clip_and_noise(&[], &p, &mut rng), Err(PrivacyError::EmptyBatch));
        assert!(matches!(
            clip_and_noise(&[vec![1.0], vec![1.0, 2.0]], &p, &mut rng),
            Err(PrivacyError::GradientLength { .. })
        ));
        assert_eq!(
            DpParams::new(0.0, 1.0).validate(),
            Err(PrivacyError::ClipNorm(0.0))
        );
        assert_eq!(
            DpParams::new(f64::INFINITY, 1.0).validate(),
            Err(PrivacyError::UnboundedNoise)
        );
        assert_eq!(
            DpParams::new(1.0, -1.0).validate(),
            Err(PrivacyError::NoiseMultiplier(-1.0))
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clipped_norm_is_bounded(
                g in proptest::collection::vec(-100.0f64..100.0, 1..40),
                c in 0.01f64..10.0,
            ) {
                prop_assert!(l2_norm(&clip(&g, c)) <= c + 1e-12);
            }
        }
    }
}
