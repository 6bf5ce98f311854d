use ndarray::{Array2, Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_shape, Result};
use crate::nn::{Scalar, Tensor};

/// A `[C, H, W]` image. Diffusion-space images use the nominal range
/// `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Array3<f32>);

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Array3::zeros((channels, height, width)))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self(Array3::from_elem((channels, height, width), value))
    }

    pub fn from_array(data: Array3<f32>) -> Self {
        Self(data)
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Array3::from_shape_vec((channels, height, width), data)
            .map(Self)
            .map_err(|_| crate::DdadError::ShapeMismatch {
                expected: vec![channels, height, width],
                got: vec![n],
            })
    }

    /// Standard normal noise of the given shape.
    pub fn randn<R: Rng + ?Sized>(channels: usize, height: usize, width: usize, rng: &mut R) -> Self {
        Self(Array3::from_shape_simple_fn((channels, height, width), || rng.sample(StandardNormal)))
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[0], s[1], s[2]]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn array(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn array_mut(&mut self) -> &mut Array3<f32> {
        &mut self.0
    }

    pub fn into_array(self) -> Array3<f32> {
        self.0
    }

    pub fn as_slice(&self) -> &[f32] {
        self.0.as_slice().expect("image tensors are kept in standard layout")
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        check_shape(&self.shape(), &other.shape())
    }

    /// `a * self + b * other`, elementwise in `f32`.
    pub fn affine(&self, a: f32, other: &ImageTensor, b: f32) -> Result<ImageTensor> {
        self.same_shape(other)?;
        Ok(Self(Zip::from(&self.0).and(&other.0).map_collect(|&x, &y| a * x + b * y)))
    }

    pub fn scaled(&self, a: f32) -> ImageTensor {
        Self(self.0.mapv(|v| a * v))
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        Zip::from(&self.0).and(&other.0).fold(0.0f32, |m, &a, &b| m.max((a - b).abs()))
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        let s = Zip::from(&self.0).and(&other.0).fold(0.0f64, |acc, &a, &b| acc + (a - b).abs() as f64);
        s / self.0.len() as f64
    }

    /// Single-sample engine tensor `[1, C, H, W]`.
    pub fn to_engine<T: Scalar>(&self) -> Tensor<T> {
        let [c, h, w] = self.shape();
        Tensor::new(vec![1, c, h, w], self.as_slice().iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
    }

    /// Batches images into one `[N, C, H, W]` engine tensor.
    pub fn batch_to_engine<T: Scalar>(images: &[ImageTensor]) -> Tensor<T> {
        assert!(!images.is_empty(), "empty batch");
        let [c, h, w] = images[0].shape();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            assert_eq!(img.shape(), [c, h, w], "batch images differ in shape");
            data.extend(img.as_slice().iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Splits an `[N, C, H, W]` engine tensor into images.
    pub fn batch_from_engine<T: Scalar>(t: &Tensor<T>) -> Vec<ImageTensor> {
        let (n, c, h, w) = t.dims4();
        (0..n)
            .map(|i| {
                let data = t.sample(i).iter().map(|v| v.to_f64_lossy() as f32).collect();
                Self(Array3::from_shape_vec((c, h, w), data).expect("sample size"))
            })
            .collect()
    }

    /// Channel-mean of `|self - other|`, an `[H, W]` map in `f64`.
    pub fn channel_mean_abs_diff(&self, other: &ImageTensor) -> Result<Array2<f64>> {
        self.same_shape(other)?;
        let [c, h, w] = self.shape();
        let mut out = Array2::<f64>::zeros((h, w));
        for ch in 0..c {
            Zip::from(&mut out)
                .and(self.0.index_axis(ndarray::Axis(0), ch))
                .and(other.0.index_axis(ndarray::Axis(0), ch))
                .for_each(|o, &a, &b| *o += (a as f64 - b as f64).abs());
        }
        out.mapv_inplace(|v| v / c as f64);
        Ok(out)
    }
}
