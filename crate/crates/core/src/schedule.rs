//! Variance schedules and the closed-form forward (noising) process.
//!
//! Timesteps are 1-based everywhere in the public API (`1..=T`), matching the
//! usual diffusion notation; `alpha_bar(0)` is defined as 1 so the terminal
//! denoising step lands on the clean sample. The 0-based storage offset lives
//! only in this module.

use serde::{Deserialize, Serialize};

use crate::error::{DdadError, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Serialisable description of a schedule. Tables are always recomputed from
/// this, never stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl std::fmt::Display for ScheduleConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}(T={}, {:e}..{:e})", self.kind, self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { timesteps, beta_start, beta_end, .. } = config;
        if timesteps < 1 {
            return Err(DdadError::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(DdadError::InvalidSchedule(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = match config.kind {
            ScheduleKind::Linear if timesteps == 1 => vec![beta_start],
            ScheduleKind::Linear => (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
                .collect(),
        };
        let alpha_bars = betas
            .iter()
            .scan(1.0f64, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { config, betas, alpha_bars })
    }

    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleConfig { kind: ScheduleKind::Linear, timesteps, beta_start, beta_end })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Total number of trained steps `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bars[i]` is the cumulative product for timestep `i + 1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if (1..=self.timesteps()).contains(&t) {
            Ok(())
        } else {
            Err(DdadError::TimestepOutOfRange { t, max: self.timesteps() })
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative signal coefficient; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            _ => {
                self.check_timestep(t)?;
                Ok(self.alpha_bars[t - 1])
            }
        }
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` as the `f32` coefficients
    /// applied to images.
    pub fn coefficients(&self, t: usize) -> Result<(f32, f32)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt() as f32, (1.0 - ab).sqrt() as f32))
    }
}

/// Closed-form `q(x_t | x)`: `sqrt(ab_t) * x + sqrt(1 - ab_t) * eps`.
pub fn perturb(x: &ImageTensor, t: usize, eps: &ImageTensor, s: &VarianceSchedule) -> Result<ImageTensor> {
    s.check_timestep(t)?;
    let (signal, noise) = s.coefficients(t)?;
    x.affine(signal, eps, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_linear_endpoints() {
        let s = VarianceSchedule::new(ScheduleConfig::default()).unwrap();
        assert_eq!(s.timesteps(), 1000);
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn two_step_alpha_bars() {
        let s = VarianceSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(VarianceSchedule::linear(1, 0.1, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(VarianceSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn invariants_hold_for_default() {
        let s = VarianceSchedule::new(ScheduleConfig::default()).unwrap();
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        // direct product from scratch at a few timesteps
        for t in [1, 17, 250, 999, 1000] {
            let direct: f64 = s.betas()[..t].iter().map(|b| 1.0 - b).product();
            let got = s.alpha_bar(t).unwrap();
            assert!(((got - direct) / direct).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn perturb_special_cases() {
        let s = VarianceSchedule::linear(2, 0.1, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = ImageTensor::randn(3, 4, 4, &mut rng);
        let zero = ImageTensor::zeros(3, 4, 4);
        let y = perturb(&x, 2, &zero, &s).unwrap();
        let k = 0.72f64.sqrt() as f32;
        assert!((y.array() - &x.array().mapv(|v| v * k)).iter().all(|d| d.abs() < 1e-7));
        assert!((0.848528 - k).abs() < 1e-6);

        let eps = ImageTensor::randn(3, 4, 4, &mut rng);
        let z = perturb(&zero, 2, &eps, &s).unwrap();
        let k2 = 0.28f64.sqrt() as f32;
        assert!((z.array() - &eps.array().mapv(|v| v * k2)).iter().all(|d| d.abs() < 1e-7));

        assert!(perturb(&x, 0, &eps, &s).is_err());
        assert!(perturb(&x, 3, &eps, &s).is_err());
        assert!(perturb(&x, 1, &ImageTensor::zeros(3, 4, 5), &s).is_err());
    }
}
