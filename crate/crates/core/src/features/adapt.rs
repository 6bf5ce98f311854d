use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_layers, FeatureExtractor};
use crate::denoiser::Denoiser;
use crate::error::{DdadError, Result};
use crate::image::ImageTensor;
use crate::nn::{Gradients, Graph, Optimizer, Scalar};
use crate::reconstruct::{reconstruct_batch, ReconstructionConfig};
use crate::schedule::VarianceSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAdaptConfig {
    #[serde(rename = "lambda_DL")]
    pub lambda_dl: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// 0 disables adaptation.
    pub epochs: usize,
    pub w_finetune: f64,
    pub layer_set_da: Vec<usize>,
    /// Images drawn per step; half are reconstructed, half serve as targets.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DomainAdaptConfig {
    fn default() -> Self {
        Self {
            lambda_dl: 0.1,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            epochs: 2,
            w_finetune: 3.0,
            layer_set_da: vec![1, 2, 3],
            batch_size: 16,
            seed: 0,
        }
    }
}

impl DomainAdaptConfig {
    pub fn validate(&self) -> Result<()> {
        check_layers(&self.layer_set_da)?;
        if !(self.lambda_dl >= 0.0) || !(self.learning_rate > 0.0) || !(self.w_finetune >= 0.0) || self.batch_size < 2 {
            return Err(DdadError::InvalidConfig(format!(
                "adaptation needs lambda_DL >= 0, learning_rate > 0, w_finetune >= 0, batch_size >= 2; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn optimizer<T: Scalar>(&self) -> Optimizer<T> {
        Optimizer::adamw(self.learning_rate, self.weight_decay)
    }
}

/// Reconstructions and their conditioning targets for one step.
#[derive(Clone, Debug)]
pub struct AdaptBatch {
    pub x0: Vec<ImageTensor>,
    pub y: Vec<ImageTensor>,
}

/// `L_Sim(phi(x0), phi(y)) + lambda [L_Sim(phi(y), twin(y)) + L_Sim(phi(x0), twin(x0))]`
/// and its gradient with respect to the live parameters.
pub fn domain_adapt_loss<T: Scalar>(
    fe: &FeatureExtractor<T>,
    batch: &AdaptBatch,
    lambda_dl: f64,
    layers: &[usize],
) -> Result<(f64, Gradients<T>)> {
    check_layers(layers)?;
    if batch.x0.len() != batch.y.len() || batch.x0.is_empty() {
        return Err(DdadError::InvalidConfig("adaptation needs equal, non-empty x0 and y batches".into()));
    }
    let x0 = ImageTensor::batch_to_engine::<T>(&batch.x0);
    let y = ImageTensor::batch_to_engine::<T>(&batch.y);
    let twin_x0 = fe.extract_twin_tensor(x0.clone(), layers)?;
    let twin_y = fe.extract_twin_tensor(y.clone(), layers)?;

    let mut g = Graph::new(fe.params());
    let xv = g.input(x0);
    let yv = g.input(y);
    let fx = fe.forward_graph(&mut g, xv, layers);
    let fy = fe.forward_graph(&mut g, yv, layers);
    let lam = T::from_f64_lossy(lambda_dl);
    let mut terms = Vec::new();
    for (k, (&a, &b)) in fx.iter().zip(&fy).enumerate() {
        let sim = g.cosine_distance(a, b);
        terms.push((sim, T::one()));
        if lambda_dl != 0.0 {
            let ty = g.input(twin_y.maps[k].clone());
            let tx = g.input(twin_x0.maps[k].clone());
            let dy = g.cosine_distance(b, ty);
            let dx = g.cosine_distance(a, tx);
            terms.push((dy, lam));
            terms.push((dx, lam));
        }
    }
    let loss = g.weighted_sum(&terms);
    let value = g.value(loss).item().to_f64_lossy();
    Ok((value, g.backward(loss)))
}

/// One optimizer step on the live parameters (the twin is untouched).
/// Returns the loss before the step.
pub fn domain_adapt_step<T: Scalar>(
    fe: &mut FeatureExtractor<T>,
    batch: &AdaptBatch,
    cfg: &DomainAdaptConfig,
    opt: &mut Optimizer<T>,
) -> Result<f64> {
    if fe.twin().is_none() {
        return Err(DdadError::InvalidConfig("capture the frozen twin before adapting".into()));
    }
    let (loss, grads) = domain_adapt_loss(fe, batch, cfg.lambda_dl, &cfg.layer_set_da)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(DdadError::NonFiniteLoss {
            value: loss,
            context: format!("domain adaptation step {}", opt.steps_taken() + 1),
        });
    }
    opt.step(fe.params_mut(), &grads);
    fe.mark_adapted();
    Ok(loss)
}

/// Fine-tunes `fe` on nominal `train` images. Each step draws a batch, splits
/// it in two, reconstructs the first half conditioned on the second with
/// `w = w_finetune`, and applies [`domain_adapt_step`].
pub fn adapt<D: Denoiser + ?Sized>(
    fe: &mut FeatureExtractor<f32>,
    denoiser: &D,
    train: &[ImageTensor],
    s: &VarianceSchedule,
    cfg: &DomainAdaptConfig,
    recon: &ReconstructionConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    fe.capture_twin();
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train.len() < 2 {
        return Err(DdadError::Dataset("adaptation needs at least two training images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = cfg.optimizer();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let half = chunk.len() / 2;
            if half == 0 {
                continue;
            }
            let inputs: Vec<ImageTensor> = chunk[..half].iter().map(|&i| train[i].clone()).collect();
            let targets: Vec<ImageTensor> = chunk[half..2 * half].iter().map(|&i| train[i].clone()).collect();
            let rc = ReconstructionConfig { w: cfg.w_finetune, seed: recon.seed ^ (losses.len() as u64 + 1), ..recon.clone() };
            let x0 = reconstruct_batch(denoiser, &inputs, &targets, &rc, s)?;
            let loss = domain_adapt_step(fe, &AdaptBatch { x0, y: targets }, cfg, &mut opt)?;
            on_step(losses.len(), loss);
            losses.push(loss);
        }
    }
    Ok(losses)
}
