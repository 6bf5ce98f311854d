//! Conditioned reconstruction: noise the input to `T'`, then denoise along a
//! strided trajectory while pulling each step toward the target image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{DdadError, Result};
use crate::image::ImageTensor;
use crate::schedule::{perturb, VarianceSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    /// Conditioning weight.
    pub w: f64,
    #[serde(rename = "T_prime")]
    pub t_prime: usize,
    pub n_steps: usize,
    /// DDIM `eta`: 0 is deterministic, 1 matches DDPM posterior variance.
    pub sigma_mode: f64,
    pub seed: u64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self { w: 3.0, t_prime: 250, n_steps: 10, sigma_mode: 1.0, seed: 0 }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if !(self.w >= 0.0) || !self.w.is_finite() {
            return Err(DdadError::InvalidConfig(format!("w must be finite and >= 0, got {}", self.w)));
        }
        if !(0.0..=1.0).contains(&self.sigma_mode) {
            return Err(DdadError::InvalidConfig(format!("sigma_mode must lie in [0, 1], got {}", self.sigma_mode)));
        }
        if self.n_steps < 1 || self.n_steps > self.t_prime || self.t_prime > timesteps {
            return Err(DdadError::InvalidConfig(format!(
                "need 1 <= n_steps ({}) <= T' ({}) <= T ({timesteps})",
                self.n_steps, self.t_prime
            )));
        }
        Ok(())
    }
}

/// Descending timesteps `t_i = T' - i * T' / n` (integer division), `i < n`.
/// Each step maps to the next entry; the last maps to 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub timesteps: Vec<usize>,
}

impl Trajectory {
    /// `(t, t_next)` pairs in execution order.
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.timesteps.get(i + 1).copied().unwrap_or(0)))
    }
}

pub fn make_trajectory(t_prime: usize, n_steps: usize) -> Result<Trajectory> {
    if n_steps < 1 || n_steps > t_prime {
        return Err(DdadError::InvalidConfig(format!("need 1 <= n_steps <= T', got n={n_steps}, T'={t_prime}")));
    }
    let timesteps = (0..n_steps).map(|i| t_prime - i * t_prime / n_steps).collect();
    Ok(Trajectory { timesteps })
}

/// `y_t = sqrt(ab_t) y + sqrt(1 - ab_t) eps_pred`: the target noised with the
/// noise predicted from `x_t`.
pub fn target_noisy(y: &ImageTensor, t: usize, eps_pred: &ImageTensor, s: &VarianceSchedule) -> Result<ImageTensor> {
    perturb(y, t, eps_pred, s)
}

/// `eps_hat = eps_pred - w sqrt(1 - ab_t) (y_t - x_t)`. `w == 0` returns
/// `eps_pred` unchanged.
pub fn adjust_noise(
    eps_pred: &ImageTensor,
    x_t: &ImageTensor,
    y_t: &ImageTensor,
    w: f64,
    t: usize,
    s: &VarianceSchedule,
) -> Result<ImageTensor> {
    eps_pred.same_shape(x_t)?;
    eps_pred.same_shape(y_t)?;
    if w == 0.0 {
        return Ok(eps_pred.clone());
    }
    let (_, b) = s.coefficients(t)?;
    let k = (w * b as f64) as f32;
    let mut out = eps_pred.clone();
    ndarray::Zip::from(out.array_mut())
        .and(y_t.array())
        .and(x_t.array())
        .for_each(|e, &yv, &xv| *e -= k * (yv - xv));
    Ok(out)
}

/// `(x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn predict_x0(x_t: &ImageTensor, eps_hat: &ImageTensor, t: usize, s: &VarianceSchedule) -> Result<ImageTensor> {
    x_t.same_shape(eps_hat)?;
    s.check_timestep(t)?;
    let (a, b) = s.coefficients(t)?;
    let mut out = x_t.clone();
    ndarray::Zip::from(out.array_mut()).and(eps_hat.array()).for_each(|x, &e| *x = (*x - b * e) / a);
    Ok(out)
}

/// DDIM `sigma_t = eta sqrt((1 - ab_next)/(1 - ab_t)) sqrt(1 - ab_t/ab_next)`.
pub fn ddim_sigma(t: usize, t_next: usize, eta: f64, s: &VarianceSchedule) -> Result<f64> {
    let ab = s.alpha_bar(t)?;
    let ab_next = s.alpha_bar(t_next)?;
    Ok(eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).max(0.0).sqrt())
}

/// `x_next = sqrt(ab_next) x0_hat + sqrt(1 - ab_next - sigma^2) eps_hat + sigma z`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<R: Rng + ?Sized>(
    eps_hat: &ImageTensor,
    x0_hat: &ImageTensor,
    t: usize,
    t_next: usize,
    sigma_mode: f64,
    s: &VarianceSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    eps_hat.same_shape(x0_hat)?;
    if t_next >= t {
        return Err(DdadError::InvalidConfig(format!("step must descend, got {t} -> {t_next}")));
    }
    let sigma = ddim_sigma(t, t_next, sigma_mode, s)?;
    let ab_next = s.alpha_bar(t_next)?;
    let dir2 = 1.0 - ab_next - sigma * sigma;
    if dir2 < -1e-12 {
        return Err(DdadError::InvalidConfig(format!(
            "sigma {sigma} too large for step {t} -> {t_next} (1 - ab_next - sigma^2 = {dir2})"
        )));
    }
    let a = ab_next.sqrt() as f32;
    let c = dir2.max(0.0).sqrt() as f32;
    let mut out = x0_hat.affine(a, eps_hat, c)?;
    if sigma > 0.0 {
        let [ch, h, w] = out.shape();
        let z = ImageTensor::randn(ch, h, w, rng);
        out = out.affine(1.0, &z, sigma as f32)?;
    }
    Ok(out)
}

/// Intermediate values of one reconstruction step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    pub t_next: usize,
    pub x_t: ImageTensor,
    pub y_t: ImageTensor,
    pub eps_hat: ImageTensor,
    pub x0_hat: ImageTensor,
}

/// Seed for the `index`-th image of a run so results do not depend on batching.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the denoising loop from given noisy starts `x_start` (at `T'`).
/// `rngs` supply step noise when `sigma_mode > 0`.
pub fn reconstruct_from<D: Denoiser + ?Sized>(
    m: &D,
    x_start: Vec<ImageTensor>,
    ys: &[ImageTensor],
    cfg: &ReconstructionConfig,
    s: &VarianceSchedule,
    rngs: &mut [ChaCha8Rng],
    mut trace: Option<&mut Vec<Vec<StepRecord>>>,
) -> Result<Vec<ImageTensor>> {
    cfg.validate(s.timesteps())?;
    if m.timesteps() != s.timesteps() {
        return Err(DdadError::ScheduleMismatch {
            expected: s.config().to_string(),
            found: format!("model bound to T={}", m.timesteps()),
        });
    }
    if x_start.len() != ys.len() || rngs.len() != ys.len() {
        return Err(DdadError::InvalidConfig("one start, target and rng per image".into()));
    }
    let traj = make_trajectory(cfg.t_prime, cfg.n_steps)?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.clear();
        tr.resize(ys.len(), Vec::new());
    }
    let mut xs = x_start;
    for (t, t_next) in traj.steps() {
        let eps = m.predict_noise_batch(&xs, &vec![t; xs.len()])?;
        let mut next = Vec::with_capacity(xs.len());
        for (i, ((x_t, e), y)) in xs.iter().zip(&eps).zip(ys).enumerate() {
            let y_t = target_noisy(y, t, e, s)?;
            let eps_hat = adjust_noise(e, x_t, &y_t, cfg.w, t, s)?;
            let x0 = predict_x0(x_t, &eps_hat, t, s)?;
            let x_next = denoise_step(&eps_hat, &x0, t, t_next, cfg.sigma_mode, s, &mut rngs[i])?;
            if !x_next.all_finite() {
                return Err(DdadError::InvalidConfig(format!("non-finite reconstruction at step {t} -> {t_next}")));
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr[i].push(StepRecord { t, t_next, x_t: x_t.clone(), y_t, eps_hat, x0_hat: x0 });
            }
            next.push(x_next);
        }
        xs = next;
    }
    Ok(xs)
}

/// Noisy start `x_{T'}` for one image, drawn from `rng`.
pub fn noisy_start<R: Rng + ?Sized>(x: &ImageTensor, t_prime: usize, s: &VarianceSchedule, rng: &mut R) -> Result<ImageTensor> {
    let [c, h, w] = x.shape();
    let eps = ImageTensor::randn(c, h, w, rng);
    perturb(x, t_prime, &eps, s)
}

/// Reconstructs every `xs[i]` under guidance from `ys[i]`. Image `i` uses
/// the random stream `image_seed(cfg.seed, i)`.
pub fn reconstruct_batch<D: Denoiser + ?Sized>(
    m: &D,
    xs: &[ImageTensor],
    ys: &[ImageTensor],
    cfg: &ReconstructionConfig,
    s: &VarianceSchedule,
) -> Result<Vec<ImageTensor>> {
    cfg.validate(s.timesteps())?;
    let mut rngs: Vec<ChaCha8Rng> = (0..xs.len()).map(|i| ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, i))).collect();
    let starts = xs
        .iter()
        .zip(&ys[..xs.len().min(ys.len())])
        .zip(rngs.iter_mut())
        .map(|((x, y), r)| {
            x.same_shape(y)?;
            noisy_start(x, cfg.t_prime, s, r)
        })
        .collect::<Result<Vec<_>>>()?;
    reconstruct_from(m, starts, ys, cfg, s, &mut rngs, None)
}

/// Single-image reconstruction (stream `image_seed(cfg.seed, 0)`).
pub fn reconstruct<D: Denoiser + ?Sized>(
    m: &D,
    x: &ImageTensor,
    y: &ImageTensor,
    cfg: &ReconstructionConfig,
    s: &VarianceSchedule,
) -> Result<ImageTensor> {
    let mut out = reconstruct_batch(m, std::slice::from_ref(x), std::slice::from_ref(y), cfg, s)?;
    Ok(out.pop().expect("one image in, one out"))
}
