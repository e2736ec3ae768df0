//! Noise schedules for the Gaussian (DDPM) and masked (absorbing) diffusion
//! families. Timesteps are 1-based; index 0 is the clean state with
//! `ᾱ_0 = 1`.

use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma2: Vec<f64>,
}

impl ContinuousSchedule {
    /// Linear β schedule from `beta_min` to `beta_max` over `steps` steps.
    ///
    /// σ_t² is the DDPM posterior variance β_t(1−ᾱ_{t−1})/(1−ᾱ_t). That is
    /// zero at t = 1, so σ_1² is clipped to σ_2²; with a single step it is β_1.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return config("continuous schedule needs at least one step");
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return config(format!(
                "beta range must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let mut sigma2: Vec<f64> = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        sigma2[0] = if steps > 1 { sigma2[1] } else { betas[0] };
        Ok(Self {
            betas,
            alpha_bars,
            sigma2,
        })
    }

    /// β range of the 1000-step reference schedule (1e-4, 0.02) rescaled to
    /// `steps` steps, capped below one.
    pub fn rescaled_default_range(steps: usize) -> (f64, f64) {
        let f = 1000.0 / steps.max(1) as f64;
        ((1e-4 * f).min(0.5), (0.02 * f).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }
}

/// Masked-diffusion schedule with survival probability ᾱ_t = 1 − t/T.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteSchedule {
    steps: usize,
}

impl DiscreteSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return config(format!("discrete schedule needs T >= 2, got {steps}"));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        1.0 - t as f64 / self.steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_step_product() {
        let s = ContinuousSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.sigma2(1) > 0.0);
    }

    #[test]
    fn constant_beta_cumulative_product() {
        let s = ContinuousSchedule::linear(3, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(3), 0.729, epsilon = 1e-15);
        assert!(s.alpha_bar(1) > s.alpha_bar(2) && s.alpha_bar(2) > s.alpha_bar(3));
    }

    #[test]
    fn posterior_variance_and_monotonicity() {
        let (lo, hi) = ContinuousSchedule::rescaled_default_range(50);
        let s = ContinuousSchedule::linear(50, lo, hi).unwrap();
        for t in 1..=50 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.sigma2(t) > 0.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        for t in 2..=50 {
            let want = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
            assert_abs_diff_eq!(s.sigma2(t), want, epsilon = 1e-15);
        }
        assert_eq!(s.sigma2(1), s.sigma2(2));
        assert!(s.alpha_bar(50) < 1e-4);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(ContinuousSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(ContinuousSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(ContinuousSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(ContinuousSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn discrete_log_linear() {
        let s = DiscreteSchedule::new(4).unwrap();
        let got: Vec<f64> = (0..=4).map(|t| s.alpha_bar(t)).collect();
        assert_eq!(got, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        for t in 0..4 {
            assert_abs_diff_eq!(s.alpha_bar(t) - s.alpha_bar(t + 1), 0.25, epsilon = 1e-15);
        }
        assert!(DiscreteSchedule::new(1).is_err());
    }
}
