//! Multi-layer feature extraction, patch aggregation and the cosine
//! similarity loss shared by scoring and domain adaptation.

mod adapt;
mod backbone;

pub use adapt::{adapt, domain_adapt_loss, domain_adapt_step, AdaptBatch, DomainAdaptConfig};
pub use backbone::{BackboneKind, DEPTH};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, restore_params, write_archive};
use crate::error::{DdadError, Result};
use crate::image::ImageTensor;
use crate::nn::{cosine_map, Graph, ParamStore, Scalar, Tensor};
use backbone::Backbone;

/// Feature maps for a set of layers; `maps[k]` belongs to `layers[k]` and is
/// `[N, C_j, H_j, W_j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T = f32> {
    pub layers: Vec<usize>,
    pub maps: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn get(&self, layer: usize) -> Option<&Tensor<T>> {
        self.layers.iter().position(|&l| l == layer).map(|k| &self.maps[k])
    }
}

/// A backbone, its current parameters and (after [`capture_twin`]) a frozen
/// copy of the parameters taken before adaptation.
///
/// [`capture_twin`]: FeatureExtractor::capture_twin
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Scalar = f32> {
    backbone: Backbone,
    seed: u64,
    params: ParamStore<T>,
    twin: Option<ParamStore<T>>,
    adapted: bool,
}

pub(crate) fn check_layers(layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(DdadError::InvalidConfig("empty layer set".into()));
    }
    match layers.iter().find(|&&j| j < 1 || j > DEPTH) {
        Some(&j) => Err(DdadError::LayerOutOfRange { layer: j, depth: DEPTH }),
        None => Ok(()),
    }
}

impl<T: Scalar> FeatureExtractor<T> {
    /// The "pretrained" state of a desk backbone is its seeded initialisation.
    pub fn new(kind: BackboneKind, seed: u64) -> Self {
        let (backbone, params) = Backbone::build(kind, seed);
        Self { backbone, seed, params, twin: None, adapted: false }
    }

    pub fn kind(&self) -> BackboneKind {
        self.backbone.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Whether any adaptation step has been applied.
    pub fn is_adapted(&self) -> bool {
        self.adapted
    }

    pub(crate) fn mark_adapted(&mut self) {
        self.adapted = true;
    }

    /// Freezes a copy of the current parameters as the distillation anchor.
    /// A second call keeps the first twin.
    pub fn capture_twin(&mut self) {
        if self.twin.is_none() {
            self.twin = Some(self.params.clone());
        }
    }

    pub fn twin(&self) -> Option<&ParamStore<T>> {
        self.twin.as_ref()
    }

    pub fn twin_hash(&self) -> Option<String> {
        self.twin.as_ref().map(|t| t.digest())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            backbone: self.backbone.clone(),
            seed: self.seed,
            params: self.params.cast(),
            twin: self.twin.as_ref().map(|t| t.cast()),
            adapted: self.adapted,
        }
    }

    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph<'_, T>,
        x: crate::nn::Var,
        layers: &[usize],
    ) -> Vec<crate::nn::Var> {
        let upto = *layers.iter().max().expect("non-empty layer set");
        let all = self.backbone.forward(g, x, upto);
        layers.iter().map(|&j| all[j - 1]).collect()
    }

    fn run(&self, params: &ParamStore<T>, x: Tensor<T>, layers: &[usize]) -> Result<FeatureStack<T>> {
        check_layers(layers)?;
        if x.shape.len() != 4 || x.shape[1] != 3 {
            return Err(DdadError::InvalidConfig(format!("extractor expects [N, 3, H, W], got {:?}", x.shape)));
        }
        let mut g = Graph::inference(params);
        let xv = g.input(x);
        let outs = self.forward_graph(&mut g, xv, layers);
        let maps = outs.into_iter().map(|v| g.take_value(v)).collect();
        Ok(FeatureStack { layers: layers.to_vec(), maps })
    }

    /// Features of a batch under the current parameters.
    pub fn extract_tensor(&self, x: Tensor<T>, layers: &[usize]) -> Result<FeatureStack<T>> {
        self.run(&self.params, x, layers)
    }

    /// Features under the frozen twin.
    pub fn extract_twin_tensor(&self, x: Tensor<T>, layers: &[usize]) -> Result<FeatureStack<T>> {
        let twin = self.twin.as_ref().ok_or_else(|| DdadError::InvalidConfig("no frozen twin captured".into()))?;
        self.run(twin, x, layers)
    }

    pub fn extract_batch(&self, images: &[ImageTensor], layers: &[usize]) -> Result<FeatureStack<T>> {
        self.extract_tensor(ImageTensor::batch_to_engine(images), layers)
    }

    pub fn extract(&self, img: &ImageTensor, layers: &[usize]) -> Result<FeatureStack<T>> {
        self.extract_batch(std::slice::from_ref(img), layers)
    }
}

/// Mirror index for half-sample symmetric padding (`d c b a | a b c d | d c b a`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Stride-1 local mean over `window x window` neighbourhoods with symmetric
/// padding, so the output has the input's shape.
pub fn patch_aggregate<T: Scalar>(fmap: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = fmap.dims4();
    if window % 2 == 0 || window == 0 {
        return Err(DdadError::InvalidConfig(format!("window must be odd and positive, got {window}")));
    }
    if window > 2 * h.min(w) {
        return Err(DdadError::InvalidConfig(format!("window {window} too large for a {h}x{w} map")));
    }
    if window == 1 {
        return Ok(fmap.clone());
    }
    let r = (window / 2) as isize;
    let norm = T::from_usize(window * window).unwrap();
    let mut out = vec![T::zero(); fmap.len()];
    let mut rows = vec![T::zero(); h * w];
    for plane in 0..n * c {
        let src = &fmap.data[plane * h * w..(plane + 1) * h * w];
        // separable: horizontal sums, then vertical
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for dx in -r..=r {
                    acc += src[y * w + reflect_index(x as isize + dx, w)];
                }
                rows[y * w + x] = acc;
            }
        }
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for dy in -r..=r {
                    acc += rows[reflect_index(y as isize + dy, h) * w + x];
                }
                dst[y * w + x] = acc / norm;
            }
        }
    }
    Ok(Tensor::new(fmap.shape.clone(), out))
}

/// `sum_j mean_positions (1 - cos)`, positions ranging over batch and space.
pub fn similarity_loss<T: Scalar>(a: &FeatureStack<T>, b: &FeatureStack<T>) -> Result<f64> {
    if a.layers != b.layers {
        return Err(DdadError::InvalidConfig(format!("layer sets differ: {:?} vs {:?}", a.layers, b.layers)));
    }
    let mut total = 0.0;
    for (ma, mb) in a.maps.iter().zip(&b.maps) {
        crate::error::check_shape(&ma.shape, &mb.shape)?;
        let cos = cosine_map(ma, mb);
        total += cos.iter().map(|c| 1.0 - c.to_f64_lossy()).sum::<f64>() / cos.len() as f64;
    }
    Ok(total)
}

#[derive(Serialize, Deserialize)]
struct ExtractorMeta {
    backbone_id: String,
    seed: u64,
    adapted: bool,
    layer_set_da: Vec<usize>,
    layer_set_score: Vec<usize>,
    twin_hash: Option<String>,
}

impl FeatureExtractor<f32> {
    /// Writes the adapted parameters. The twin is not stored: it is the
    /// seeded initial state and is rebuilt and checked against `twin_hash`
    /// on load.
    pub fn save(&self, path: &Path, layer_set_da: &[usize], layer_set_score: &[usize]) -> Result<()> {
        let meta = ExtractorMeta {
            backbone_id: self.kind().id().to_string(),
            seed: self.seed,
            adapted: self.adapted,
            layer_set_da: layer_set_da.to_vec(),
            layer_set_score: layer_set_score.to_vec(),
            twin_hash: self.twin_hash(),
        };
        write_archive(path, "feature_extractor", serde_json::to_value(meta)?, &self.params)
    }

    /// Returns the extractor and its recorded `(layer_set_da, layer_set_score)`.
    pub fn load(path: &Path) -> Result<(Self, Vec<usize>, Vec<usize>)> {
        let (header, tensors) = read_archive(path, "feature_extractor")?;
        let meta: ExtractorMeta = serde_json::from_value(header.meta.clone())
            .map_err(|e| DdadError::CorruptCheckpoint(format!("extractor metadata: {e}")))?;
        let mut fe = Self::new(BackboneKind::parse(&meta.backbone_id)?, meta.seed);
        if let Some(h) = &meta.twin_hash {
            fe.capture_twin();
            if fe.twin_hash().as_ref() != Some(h) {
                return Err(DdadError::CorruptCheckpoint(format!(
                    "{}: frozen twin of {} seed {} does not reproduce hash {h}",
                    path.display(),
                    meta.backbone_id,
                    meta.seed
                )));
            }
        }
        restore_params(&mut fe.params, &header, tensors)?;
        fe.adapted = meta.adapted;
        Ok((fe, meta.layer_set_da, meta.layer_set_score))
    }
}
