use super::{DpParams, PrivacyError};

/// Default target δ.
pub const DEFAULT_DELTA: f64 = 1e-5;

/// Rényi orders searched by the accountant: 1.25, 1.5, then every integer from 2 to 64.
pub const ALPHA_GRID: [f64; 65] = {
    let mut grid = [0.0; 65];
    grid[0] = 1.25;
    grid[1] = 1.5;
    let mut i = 2;
    while i < 65 {
        grid[i] = i as f64;
        i += 1;
    }
    grid
};

/// Accumulated (ε, δ) after a number of DP-SGD steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacySpend {
    pub steps: usize,
    pub epsilon: f64,
    pub delta: f64,
}

/// RDP of `steps` compositions of the Gaussian mechanism at order `alpha`: `steps·α / (2σ²)`.
pub fn rdp_epsilon(alpha: f64, noise_multiplier: f64, steps: usize) -> f64 {
    steps as f64 * alpha / (2.0 * noise_multiplier * noise_multiplier)
}

/// Converts RDP to (ε, δ): `min_α steps·α/(2σ²) + ln(1/δ)/(α−1)` over [`ALPHA_GRID`].
///
/// `σ = 0` reports ε = ∞. Zero steps report ε = 0.
pub fn account(params: &DpParams, steps: usize, delta: f64) -> Result<PrivacySpend, PrivacyError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::Delta(delta));
    }
    let sigma = params.noise_multiplier;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(PrivacyError::NoiseMultiplier(sigma));
    }
    let epsilon = if steps == 0 {
        0.0
    } else if sigma == 0.0 {
        f64::INFINITY
    } else {
        let log_inv_delta = (1.0 / delta).ln();
        ALPHA_GRID
            .iter()
            .map(|&a| rdp_epsilon(a, sigma, steps) + log_inv_delta / (a - 1.0))
            .fold(f64::INFINITY, f64::min)
    };
    Ok(PrivacySpend {
        steps,
        epsilon,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eps(sigma: f64, steps: usize) -> f64 {
        account(&DpParams::new(1.0, sigma), steps, DEFAULT_DELTA)
            .unwrap()
            .epsilon
    }

    #[test]
    fn grid_shape() {
        assert_eq!(ALPHA_GRID[0], 1.25);
        assert_eq!(ALPHA_GRID[1], 1.5);
        assert_eq!(ALPHA_GRID[2], 2.0);
        assert_eq!(ALPHA_GRID[64], 64.0);
    }

    #[test]
    fn closed_form_order_two() {
        assert_eq!(rdp_epsilon(2.0, 1.0, 1), 1.0);
    }

    #[test]
    fn monotone_in_steps() {
        for steps in [1, 2, 4, 8, 16, 300] {
            assert!(eps(1.0, 2 * steps) >= eps(1.0, steps));
        }
    }

    #[test]
    fn larger_sigma_spends_less() {
        // Brute force over the grid, independent of `account`'s fold.
        let brute = |sigma: f64| {
            let mut best = f64::INFINITY;
            for a in ALPHA_GRID {
                let v = 10.0 * a / (2.0 * sigma * sigma) + (1e5f64).ln() / (a - 1.0);
                if v < best {
                    best = v;
                }
            }
            best
        };
        assert!((eps(1.0, 10) - brute(1.0)).abs() < 1e-12);
        assert!((eps(2.0, 10) - brute(2.0)).abs() < 1e-12);
        assert!(eps(2.0, 10) < eps(1.0, 10));
    }

    #[test]
    fn zero_sigma_is_infinite_and_zero_steps_free() {
        assert_eq!(eps(0.0, 3), f64::INFINITY);
        assert_eq!(eps(1.0, 0), 0.0);
    }

    #[test]
    fn invalid_delta_rejected() {
        let p = DpParams::new(1.0, 1.0);
        assert_eq!(account(&p, 1, 0.0), Err(PrivacyError::Delta(0.0)));
        assert_eq!(account(&p, 1, 1.0), Err(PrivacyError::Delta(1.0)));
    }
}
