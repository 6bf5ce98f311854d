//! Noise-prediction networks `eps_theta(x_t, t)`.
//!
//! [`Denoiser`] is the inference contract consumed by reconstruction and
//! scoring. Besides the trainable [`UNetDenoiser`], a few parameter-free
//! doubles implement it so the rest of the pipeline can be exercised without
//! training: [`OracleDenoiser`], [`ZeroDenoiser`] and the affine
//! [`SubspaceDenoiser`].

mod subspace;
mod train;
mod unet;

pub use subspace::SubspaceDenoiser;
pub use train::{denoising_objective, train, train_step, train_step_on, TrainConfig, TrainableDenoiser};
pub use unet::{DenoiserModel, UNetConfig, UNetDenoiser};

use crate::error::{DdadError, Result};
use crate::image::ImageTensor;
use crate::schedule::VarianceSchedule;

pub trait Denoiser: Send + Sync {
    /// Number of trained diffusion steps `T` the model is bound to.
    fn timesteps(&self) -> usize;

    /// Predicts the noise in each `x_t[i]` at timestep `t[i]`.
    fn predict_noise_batch(&self, x_t: &[ImageTensor], t: &[usize]) -> Result<Vec<ImageTensor>>;

    fn predict_noise(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        let mut out = self.predict_noise_batch(std::slice::from_ref(x_t), &[t])?;
        Ok(out.pop().expect("one output per input"))
    }
}

pub(crate) fn check_batch(x_t: &[ImageTensor], t: &[usize], timesteps: usize) -> Result<()> {
    if x_t.len() != t.len() {
        return Err(DdadError::InvalidConfig(format!(
            "{} images but {} timesteps",
            x_t.len(),
            t.len()
        )));
    }
    match t.iter().find(|&&ti| ti < 1 || ti > timesteps) {
        Some(&bad) => Err(DdadError::TimestepOutOfRange { t: bad, max: timesteps }),
        None => Ok(()),
    }
}

/// Where an [`OracleDenoiser`] gets the truth from.
#[derive(Clone, Debug)]
enum OracleSource {
    /// The exact noise tensors that were mixed in.
    Noise(Vec<ImageTensor>),
    /// The clean images; the implied noise is solved from the forward process.
    Clean { schedule: VarianceSchedule, images: Vec<ImageTensor> },
}

/// Test double that knows the true noise. Batch position `i` is answered
/// from entry `i` of its source (a single entry is broadcast).
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    timesteps: usize,
    source: OracleSource,
}

impl OracleDenoiser {
    /// Returns the stored noise verbatim, whatever the input.
    pub fn from_noise(timesteps: usize, noise: Vec<ImageTensor>) -> Self {
        Self { timesteps, source: OracleSource::Noise(noise) }
    }

    /// Returns `(x_t - sqrt(ab_t) x) / sqrt(1 - ab_t)` for the stored clean `x`.
    pub fn from_clean(schedule: VarianceSchedule, images: Vec<ImageTensor>) -> Self {
        Self { timesteps: schedule.timesteps(), source: OracleSource::Clean { schedule, images } }
    }

    fn pick<'a>(list: &'a [ImageTensor], i: usize) -> Result<&'a ImageTensor> {
        match list.len() {
            1 => Ok(&list[0]),
            n if i < n => Ok(&list[i]),
            n => Err(DdadError::InvalidConfig(format!("oracle holds {n} entries, batch index {i}"))),
        }
    }
}

impl Denoiser for OracleDenoiser {
    fn timesteps(&self) -> usize {
        self.timesteps
    }

    fn predict_noise_batch(&self, x_t: &[ImageTensor], t: &[usize]) -> Result<Vec<ImageTensor>> {
        check_batch(x_t, t, self.timesteps)?;
        x_t.iter()
            .zip(t)
            .enumerate()
            .map(|(i, (x, &ti))| match &self.source {
                OracleSource::Noise(list) => {
                    let eps = Self::pick(list, i)?;
                    x.same_shape(eps)?;
                    Ok(eps.clone())
                }
                OracleSource::Clean { schedule, images } => {
                    let clean = Self::pick(images, i)?;
                    let ab = schedule.alpha_bar(ti)?;
                    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                    x.affine((1.0 / b) as f32, clean, (-a / b) as f32)
                }
            })
            .collect()
    }
}

/// Always predicts zero noise.
#[derive(Clone, Copy, Debug)]
pub struct ZeroDenoiser {
    pub timesteps: usize,
}

impl Denoiser for ZeroDenoiser {
    fn timesteps(&self) -> usize {
        self.timesteps
    }

    fn predict_noise_batch(&self, x_t: &[ImageTensor], t: &[usize]) -> Result<Vec<ImageTensor>> {
        check_batch(x_t, t, self.timesteps)?;
        Ok(x_t.iter().map(|x| {
            let [c, h, w] = x.shape();
            ImageTensor::zeros(c, h, w)
        }).collect())
    }
}
