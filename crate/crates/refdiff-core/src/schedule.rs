//! Forward diffusion noise schedule.
//!
//! Linear betas `beta_1 .. beta_T`, `alpha_t = 1 - beta_t`, and cumulative
//! products `alpha_bar_t = prod_{s<=t} alpha_s`, with `alpha_bar_0 = 1` so
//! sampler boundary cases fall out naturally. Timesteps are 1-based: `t` in
//! `[1, T]`, matching the convention that `z_0` is clean data.
//!
//! The two closed forms used everywhere:
//! forward `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`, and
//! clean-sample reconstruction
//! `z0_hat = (z_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

/// Noise schedule parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    /// `beta_1`, the variance of the first (least noisy) step.
    pub beta_start: f64,
    /// `beta_T`, the variance of the last step.
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Precomputed schedule tables.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        if config.steps == 0 {
            return Err(CoreError::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(0.0 < config.beta_start && config.beta_start <= config.beta_end && config.beta_end < 1.0)
        {
            return Err(CoreError::InvalidConfig(format!(
                "betas must satisfy 0 < start <= end < 1, got {} .. {}",
                config.beta_start, config.beta_end
            )));
        }
        let t_max = config.steps;
        let mut betas = Vec::with_capacity(t_max);
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut abar = T::one();
        for i in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            let beta = T::from_f64(config.beta_start + (config.beta_end - config.beta_start) * frac);
            abar = abar * (T::one() - beta);
            betas.push(beta);
            alpha_bars.push(abar);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `[1, T]`.
    pub fn beta(&self, t: usize) -> T {
        assert!(t >= 1 && t <= self.steps(), "t={t} outside [1,{}]", self.steps());
        self.betas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `[0, T]`; `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        assert!(t <= self.steps(), "t={t} outside [0,{}]", self.steps());
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Noise `z_0` to level `t` with the given unit-normal draw.
    pub fn q_sample(&self, z0: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let abar = self.alpha_bar(t);
        let a = abar.sqrt();
        let b = (T::one() - abar).sqrt();
        z0.scale(a).add(&eps.scale(b))
    }

    /// Invert the forward closed form given a noise estimate.
    pub fn predict_z0(&self, zt: &Tensor<T>, eps_hat: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let abar = self.alpha_bar(t);
        let b = (T::one() - abar).sqrt();
        Ok(zt.sub(&eps_hat.scale(b))?.scale(abar.sqrt().recip()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_are_the_standard_linear_schedule() {
        let c = ScheduleConfig::default();
        assert_eq!(c.steps, 1000);
        assert_eq!(c.beta_start, 1e-4);
        assert_eq!(c.beta_end, 2e-2);
        let s: NoiseSchedule<f64> = NoiseSchedule::new(&c).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_matches_hand_computed_products() {
        // T=4 with betas 0.1, 0.2, 0.3, 0.4: cumulative products of
        // 0.9, 0.8, 0.7, 0.6 are 0.9, 0.72, 0.504, 0.3024.
        let c = ScheduleConfig {
            steps: 4,
            beta_start: 0.1,
            beta_end: 0.4,
        };
        let s: NoiseSchedule<f64> = NoiseSchedule::new(&c).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for (t, expect) in [(1, 0.9), (2, 0.72), (3, 0.504), (4, 0.3024)] {
            assert!(
                (s.alpha_bar(t) - expect).abs() < 1e-12,
                "alpha_bar({t}) = {}",
                s.alpha_bar(t)
            );
        }
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing_within_unit_interval() {
        let s: NoiseSchedule<f64> = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut prev = 1.0;
        for t in 1..=s.steps() {
            let a = s.alpha_bar(t);
            assert!(a > 0.0 && a < 1.0, "alpha_bar({t}) = {a}");
            assert!(a < prev, "not decreasing at t={t}");
            prev = a;
        }
    }

    #[test]
    fn alpha_bar_satisfies_its_recurrence() {
        let s: NoiseSchedule<f64> = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        for t in 1..=s.steps() {
            let lhs = s.alpha_bar(t);
            let rhs = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
            assert!((lhs - rhs).abs() < 1e-15, "recurrence broken at t={t}");
        }
    }

    #[test]
    fn predict_z0_inverts_q_sample_at_many_levels() {
        let s: NoiseSchedule<f64> = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for round in 0..20 {
            let z0 = Tensor::<f64>::randn(&[4, 5, 5], &mut rng);
            let eps = Tensor::<f64>::randn(&[4, 5, 5], &mut rng);
            let t = 1 + (round * 53) % s.steps();
            let zt = s.q_sample(&z0, &eps, t).unwrap();
            let back = s.predict_z0(&zt, &eps, t).unwrap();
            let err = back.max_abs_diff(&z0);
            assert!(err < 1e-9, "t={t}: round trip error {err}");
        }
    }

    #[test]
    fn q_sample_at_t0_is_identity() {
        let s: NoiseSchedule<f32> = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = Tensor::<f32>::randn(&[2, 3, 3], &mut rng);
        let eps = Tensor::<f32>::randn(&[2, 3, 3], &mut rng);
        let zt = s.q_sample(&z0, &eps, 0).unwrap();
        assert_eq!(zt, z0);
    }

    #[test]
    fn rejects_bad_configs() {
        for (steps, b0, b1) in [(0, 1e-4, 2e-2), (10, 0.0, 0.5), (10, 0.5, 0.2), (10, 0.1, 1.0)] {
            let c = ScheduleConfig {
                steps,
                beta_start: b0,
                beta_end: b1,
            };
            assert!(NoiseSchedule::<f64>::new(&c).is_err(), "{c:?} accepted");
        }
    }
}
