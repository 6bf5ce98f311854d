use nalgebra::{DMatrix, SymmetricEigen};

use super::{check_batch, Denoiser};
use crate::error::{DdadError, Result};
use crate::image::ImageTensor;
use crate::schedule::VarianceSchedule;

/// Exact posterior-mean noise predictor for a Gaussian fitted to the
/// training images (mean plus low-rank PCA covariance plus isotropic floor).
///
/// With `x ~ N(mu, S)` and `x_t = a x + b eps`,
/// `E[eps | x_t] = b (a^2 S + b^2 I)^-1 (x_t - a mu)`, which is diagonal in the
/// PCA basis. Needs no training loop, reconstructs in-distribution images and
/// fails on content outside the principal subspace.
#[derive(Clone, Debug)]
pub struct SubspaceDenoiser {
    schedule: VarianceSchedule,
    shape: [usize; 3],
    mean: Vec<f64>,
    /// Orthonormal principal directions, one per row.
    basis: Vec<Vec<f64>>,
    variances: Vec<f64>,
    residual_variance: f64,
}

impl SubspaceDenoiser {
    /// Fits on `images`, keeping at most `max_components` directions.
    /// `residual_floor` bounds the isotropic variance from below.
    pub fn fit(
        schedule: VarianceSchedule,
        images: &[ImageTensor],
        max_components: usize,
        residual_floor: f64,
    ) -> Result<Self> {
        let first = images.first().ok_or_else(|| DdadError::Dataset("no images to fit".into()))?;
        let shape = first.shape();
        let d = first.as_slice().len();
        let n = images.len();
        for im in images {
            first.same_shape(im)?;
        }
        let mut mean = vec![0.0f64; d];
        for im in images {
            for (m, &v) in mean.iter_mut().zip(im.as_slice()) {
                *m += v as f64 / n as f64;
            }
        }
        let centred: Vec<Vec<f64>> = images
            .iter()
            .map(|im| im.as_slice().iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
            .collect();
        let total_var: f64 = centred.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64;

        let gram = DMatrix::from_fn(n, n, |i, j| {
            centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum::<f64>() / n as f64
        });
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let mut basis = Vec::new();
        let mut variances = Vec::new();
        for &k in order.iter().take(max_components) {
            let lambda = eig.eigenvalues[k];
            if lambda <= 1e-10 * total_var.max(1e-300) {
                break;
            }
            let v = eig.eigenvectors.column(k);
            let mut u = vec![0.0f64; d];
            for (i, row) in centred.iter().enumerate() {
                for (uj, &x) in u.iter_mut().zip(row) {
                    *uj += v[i] * x;
                }
            }
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            basis.push(u);
            variances.push(lambda);
        }
        let kept: f64 = variances.iter().sum();
        let rest = d.saturating_sub(variances.len()).max(1) as f64;
        let residual_variance = ((total_var - kept) / rest).max(residual_floor);
        Ok(Self { schedule, shape, mean, basis, variances, residual_variance })
    }

    pub fn num_components(&self) -> usize {
        self.basis.len()
    }

    pub fn mean_image(&self) -> ImageTensor {
        let [c, h, w] = self.shape;
        ImageTensor::from_vec(c, h, w, self.mean.iter().map(|&v| v as f32).collect()).expect("shape fixed at fit")
    }

    fn predict_one(&self, x: &ImageTensor, t: usize) -> Result<ImageTensor> {
        if x.shape() != self.shape {
            return Err(DdadError::ShapeMismatch { expected: self.shape.to_vec(), got: x.shape().to_vec() });
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let gain = |var: f64| b / (a * a * var + b * b);
        let perp = gain(self.residual_variance);
        let r: Vec<f64> = x.as_slice().iter().zip(&self.mean).map(|(&v, m)| v as f64 - a * m).collect();
        let mut out: Vec<f64> = r.iter().map(|v| perp * v).collect();
        for (u, &var) in self.basis.iter().zip(&self.variances) {
            let coeff = u.iter().zip(&r).map(|(p, q)| p * q).sum::<f64>() * (gain(var) - perp);
            for (o, p) in out.iter_mut().zip(u) {
                *o += coeff * p;
            }
        }
        let [c, h, w] = self.shape;
        ImageTensor::from_vec(c, h, w, out.into_iter().map(|v| v as f32).collect())
    }
}

impl Denoiser for SubspaceDenoiser {
    fn timesteps(&self) -> usize {
        self.schedule.timesteps()
    }

    fn predict_noise_batch(&self, x_t: &[ImageTensor], t: &[usize]) -> Result<Vec<ImageTensor>> {
        check_batch(x_t, t, self.timesteps())?;
        x_t.iter().zip(t).map(|(x, &ti)| self.predict_one(x, ti)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{perturb, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_image_dataset_recovers_the_noise_at_small_t() {
        // A point mass: the posterior mean of x is the image itself, so the
        // predicted noise is exactly (x_t - a x) / b up to the floor.
        let s = VarianceSchedule::new(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ImageTensor::randn(3, 4, 4, &mut rng);
        let d = SubspaceDenoiser::fit(s.clone(), std::slice::from_ref(&x), 8, 1e-12).unwrap();
        assert_eq!(d.num_components(), 0);
        let eps = ImageTensor::randn(3, 4, 4, &mut rng);
        let xt = perturb(&x, 100, &eps, &s).unwrap();
        assert!(d.predict_noise(&xt, 100).unwrap().max_abs_diff(&eps) < 1e-4);
    }

    #[test]
    fn basis_is_orthonormal() {
        let s = VarianceSchedule::new(ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<_> = (0..6).map(|_| ImageTensor::randn(1, 3, 3, &mut rng)).collect();
        let d = SubspaceDenoiser::fit(s, &data, 10, 1e-6).unwrap();
        assert_eq!(d.num_components(), 5);
        for (i, u) in d.basis.iter().enumerate() {
            for (j, v) in d.basis.iter().enumerate() {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }
}
