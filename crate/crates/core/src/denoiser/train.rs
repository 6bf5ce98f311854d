use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, OracleDenoiser, SubspaceDenoiser, UNetDenoiser, ZeroDenoiser};
use crate::error::{DdadError, Result};
use crate::image::ImageTensor;
use crate::nn::{Gradients, Graph, Optimizer, Scalar};
use crate::schedule::{perturb, VarianceSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, weight_decay: 0.05, batch_size: 16, epochs: 100, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs < 1 || self.batch_size < 1 || self.weight_decay < 0.0 {
            return Err(DdadError::InvalidConfig(format!(
                "training needs learning_rate > 0, epochs >= 1, batch_size >= 1, weight_decay >= 0; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Optimizer<f32> {
        Optimizer::adam(self.learning_rate, self.weight_decay)
    }
}

/// Mean over all elements of `(eps_theta(x_t, t) - eps)^2`.
pub fn denoising_objective<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &[ImageTensor],
    t: &[usize],
    eps: &[ImageTensor],
) -> Result<f64> {
    let pred = model.predict_noise_batch(x_t, t)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (p, e) in pred.iter().zip(eps) {
        p.same_shape(e)?;
        sum += p.as_slice().iter().zip(e.as_slice()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        n += p.as_slice().len();
    }
    Ok(sum / n.max(1) as f64)
}

pub trait TrainableDenoiser: Denoiser {
    /// Evaluates the objective on `(x_t, t, eps)` and applies one optimizer
    /// step. Returns the loss before the step. Parameter-free models only
    /// report the loss.
    fn fit_batch(
        &mut self,
        x_t: &[ImageTensor],
        t: &[usize],
        eps: &[ImageTensor],
        _opt: &mut Optimizer<f32>,
    ) -> Result<f64> {
        denoising_objective(self, x_t, t, eps)
    }
}

impl TrainableDenoiser for OracleDenoiser {}
impl TrainableDenoiser for ZeroDenoiser {}
impl TrainableDenoiser for SubspaceDenoiser {}

impl<T: Scalar> UNetDenoiser<T> {
    /// Objective value and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        x_t: &[ImageTensor],
        t: &[usize],
        eps: &[ImageTensor],
    ) -> Result<(f64, Gradients<T>)> {
        super::check_batch(x_t, t, self.timesteps())?;
        if eps.len() != x_t.len() {
            return Err(DdadError::InvalidConfig("one noise tensor per image required".into()));
        }
        let x = ImageTensor::batch_to_engine::<T>(x_t);
        self.check_input(&x.shape)?;
        let mut g = Graph::new(self.params());
        let xv = g.input(x);
        let pred = self.forward(&mut g, xv, t);
        let target = g.input(ImageTensor::batch_to_engine(eps));
        let loss = g.mse(pred, target);
        let value = g.value(loss).item().to_f64_lossy();
        Ok((value, g.backward(loss)))
    }
}

impl TrainableDenoiser for UNetDenoiser<f32> {
    fn fit_batch(
        &mut self,
        x_t: &[ImageTensor],
        t: &[usize],
        eps: &[ImageTensor],
        opt: &mut Optimizer<f32>,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients(x_t, t, eps)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(DdadError::NonFiniteLoss {
                value: loss,
                context: format!("denoiser step {} (timesteps {t:?})", opt.steps_taken() + 1),
            });
        }
        opt.step(self.params_mut(), &grads);
        Ok(loss)
    }
}

/// One step on a given noise draw: forms `x_t = perturb(x, t, eps)` and fits.
pub fn train_step_on<M: TrainableDenoiser + ?Sized>(
    model: &mut M,
    batch: &[ImageTensor],
    t: &[usize],
    eps: &[ImageTensor],
    s: &VarianceSchedule,
    opt: &mut Optimizer<f32>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DdadError::InvalidConfig("empty training batch".into()));
    }
    if model.timesteps() != s.timesteps() {
        return Err(DdadError::ScheduleMismatch {
            expected: s.config().to_string(),
            found: format!("model bound to T={}", model.timesteps()),
        });
    }
    let x_t = batch
        .iter()
        .zip(t)
        .zip(eps)
        .map(|((x, &ti), e)| perturb(x, ti, e, s))
        .collect::<Result<Vec<_>>>()?;
    let loss = model.fit_batch(&x_t, t, eps, opt)?;
    if !loss.is_finite() {
        return Err(DdadError::NonFiniteLoss { value: loss, context: "denoiser objective".into() });
    }
    Ok(loss)
}

/// Samples `t ~ U{1..T}` and `eps ~ N(0, I)` per item, then takes one step.
pub fn train_step<M: TrainableDenoiser + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    batch: &[ImageTensor],
    s: &VarianceSchedule,
    rng: &mut R,
    opt: &mut Optimizer<f32>,
) -> Result<f64> {
    let t: Vec<usize> = batch.iter().map(|_| rng.random_range(1..=s.timesteps())).collect();
    let eps: Vec<ImageTensor> = batch
        .iter()
        .map(|x| {
            let [c, h, w] = x.shape();
            ImageTensor::randn(c, h, w, rng)
        })
        .collect();
    train_step_on(model, batch, &t, &eps, s, opt)
}

/// Shuffled mini-batch epochs over `data`. Calls `on_step(step, loss)` after
/// every step and returns the loss sequence.
pub fn train<M: TrainableDenoiser + ?Sized>(
    model: &mut M,
    data: &[ImageTensor],
    s: &VarianceSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DdadError::Dataset("no training images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ImageTensor> = chunk.iter().map(|&i| data[i].clone()).collect();
            let loss = train_step(model, &batch, s, &mut rng, &mut opt)?;
            on_step(losses.len(), loss);
            losses.push(loss);
        }
    }
    Ok(losses)
}
