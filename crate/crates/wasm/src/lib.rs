//! Browser demo: a small synthetic texture set, a closed-form linear-Gaussian
//! denoiser fitted on its nominal images and a seeded toy feature extractor.
//! No training happens in the page.
//!
//! Three operations: view the forward noising process, reconstruct one test
//! image under a chosen guidance weight (with its anomaly heatmap), and score
//! the whole test set.

use ddad_core::colormap::inferno;
use ddad_core::dataset::{rgb_from_tensor, Item};
use ddad_core::denoiser::SubspaceDenoiser;
use ddad_core::features::{BackboneKind, FeatureExtractor};
use ddad_core::reconstruct::{reconstruct_batch, ReconstructionConfig};
use ddad_core::schedule::{perturb, ScheduleConfig, VarianceSchedule};
use ddad_core::scoring::{distance_maps, heatmaps, Provenance, ScoreConfig};
use ddad_core::metrics::{auroc, pixel_auroc};
use ddad_core::synth::{synth_dataset, SynthSpec};
use ddad_core::ImageTensor;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const RESOLUTION: usize = 32;
const N_TRAIN: usize = 48;
const N_TEST: usize = 8;
const COMPONENTS: usize = 24;

#[wasm_bindgen]
pub struct Demo {
    schedule: VarianceSchedule,
    test: Vec<Item>,
    model: SubspaceDenoiser,
    fe: FeatureExtractor,
    score: ScoreConfig,
}

/// One reconstruction with its heatmap, as RGBA buffers.
#[wasm_bindgen]
pub struct Frame {
    recon: Vec<u8>,
    heatmap: Vec<u8>,
    score: f64,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn recon(&self) -> Vec<u8> {
        self.recon.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn heatmap(&self) -> Vec<u8> {
        self.heatmap.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn score(&self) -> f64 {
        self.score
    }
}

fn rgba_of(img: &ImageTensor) -> Vec<u8> {
    rgb_from_tensor(img).pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn rgba_heat(map: &Array2<f64>, max: f64) -> Vec<u8> {
    let s = if max > 0.0 { 1.0 / max } else { 0.0 };
    map.iter().flat_map(|&v| {
        let [r, g, b] = inferno(v * s);
        [r, g, b, 255]
    }).collect()
}

impl Demo {
    /// Builds the demo; `Err` carries a readable message.
    pub fn build(seed: u64) -> Result<Self, String> {
        let spec = SynthSpec { n_train: N_TRAIN, n_test: N_TEST, resolution: RESOLUTION, ..SynthSpec::default() };
        let ds = synth_dataset(&spec, seed).map_err(|e| e.to_string())?;
        let schedule = VarianceSchedule::new(ScheduleConfig::default()).map_err(|e| e.to_string())?;
        let model = SubspaceDenoiser::fit(schedule.clone(), &ds.train_images(), COMPONENTS, 1e-3).map_err(|e| e.to_string())?;
        let test = ds.test_items().into_iter().cloned().collect();
        let fe = FeatureExtractor::new(BackboneKind::ToyCnn, seed);
        Ok(Self { schedule, test, model, fe, score: ScoreConfig { sigma_g: 1.0, ..ScoreConfig::default() } })
    }

    fn item(&self, index: usize) -> Result<&Item, String> {
        self.test.get(index).ok_or_else(|| format!("image {index} out of range (0..{})", self.test.len()))
    }

    /// `x_t` for test image `index` under noise drawn from `noise_seed`.
    pub fn forward(&self, index: usize, t: usize, noise_seed: u64) -> Result<ImageTensor, String> {
        let x = &self.item(index)?.image;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let eps = ImageTensor::randn(3, RESOLUTION, RESOLUTION, &mut rng);
        perturb(x, t, &eps, &self.schedule).map_err(|e| e.to_string())
    }

    fn recon_config(w: f64, steps: usize, t_prime: usize) -> ReconstructionConfig {
        ReconstructionConfig { w, t_prime, n_steps: steps, sigma_mode: 0.0, seed: 0 }
    }

    /// Reconstructions of every test image.
    pub fn reconstruct_all(&self, w: f64, steps: usize, t_prime: usize) -> Result<Vec<ImageTensor>, String> {
        let xs: Vec<ImageTensor> = self.test.iter().map(|i| i.image.clone()).collect();
        reconstruct_batch(&self.model, &xs, &xs, &Self::recon_config(w, steps, t_prime), &self.schedule)
            .map_err(|e| e.to_string())
    }

    /// Reconstruction and combined heatmap for one image. Normalisation uses
    /// the whole test set so the heatmap scale is comparable across images.
    pub fn detect_one(&self, index: usize, w: f64, steps: usize, t_prime: usize) -> Result<(ImageTensor, Array2<f64>, f64), String> {
        self.item(index)?;
        let recon = self.reconstruct_all(w, steps, t_prime)?;
        let xs: Vec<ImageTensor> = self.test.iter().map(|i| i.image.clone()).collect();
        let maps = distance_maps(&recon, &xs, &self.fe, &self.score).map_err(|e| e.to_string())?;
        let hm = heatmaps(&maps, &self.score, Provenance::Combined).map_err(|e| e.to_string())?;
        let h = &hm[index];
        Ok((recon[index].clone(), h.map.clone(), h.image_score))
    }

    /// Image and pixel AUROC of the pixel, feature and combined heatmaps.
    pub fn evaluate_all(&self, w: f64, steps: usize, t_prime: usize) -> Result<serde_json::Value, String> {
        let recon = self.reconstruct_all(w, steps, t_prime)?;
        let xs: Vec<ImageTensor> = self.test.iter().map(|i| i.image.clone()).collect();
        let maps = distance_maps(&recon, &xs, &self.fe, &self.score).map_err(|e| e.to_string())?;
        let masks: Vec<Array2<bool>> = self.test.iter().map(|i| i.mask.clone()).collect();
        let mut out = serde_json::Map::new();
        for p in Provenance::ALL {
            let hm = heatmaps(&maps, &self.score, p).map_err(|e| e.to_string())?;
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (h, it) in hm.iter().zip(&self.test) {
                if it.is_defect() { pos.push(h.image_score) } else { neg.push(h.image_score) }
            }
            let img = auroc(&pos, &neg).map_err(|e| e.to_string())?;
            let planes: Vec<Array2<f64>> = hm.into_iter().map(|h| h.map).collect();
            let pix = pixel_auroc(&planes, &masks).map_err(|e| e.to_string())?;
            out.insert(p.name().into(), serde_json::json!({ "image_auroc": img, "pixel_auroc": pix }));
        }
        Ok(serde_json::Value::Object(out))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsError> {
        Self::build(seed).map_err(|e| JsError::new(&e))
    }

    pub fn size(&self) -> usize {
        RESOLUTION
    }

    pub fn count(&self) -> usize {
        self.test.len()
    }

    pub fn is_defect(&self, index: usize) -> bool {
        self.test.get(index).is_some_and(|i| i.is_defect())
    }

    pub fn image_rgba(&self, index: usize) -> Vec<u8> {
        self.test.get(index).map(|i| rgba_of(&i.image)).unwrap_or_default()
    }

    pub fn mask_rgba(&self, index: usize) -> Vec<u8> {
        self.test
            .get(index)
            .map(|i| i.mask.iter().flat_map(|&b| if b { [255, 255, 255, 255] } else { [0, 0, 0, 255] }).collect())
            .unwrap_or_default()
    }

    /// Forward process view of image `index` at timestep `t`.
    pub fn forward_rgba(&self, index: usize, t: usize, noise_seed: u64) -> Result<Vec<u8>, JsError> {
        self.forward(index, t, noise_seed).map(|x| rgba_of(&x)).map_err(|e| JsError::new(&e))
    }

    /// Conditioned reconstruction of image `index` with its heatmap.
    pub fn detect(&self, index: usize, w: f64, steps: usize, t_prime: usize) -> Result<Frame, JsError> {
        let (recon, map, score) = self.detect_one(index, w, steps, t_prime).map_err(|e| JsError::new(&e))?;
        let max = map.iter().copied().fold(0.0, f64::max);
        Ok(Frame { recon: rgba_of(&recon), heatmap: rgba_heat(&map, max), score })
    }

    /// Test-set AUROC summary as JSON text.
    pub fn evaluate(&self, w: f64, steps: usize, t_prime: usize) -> Result<String, JsError> {
        self.evaluate_all(w, steps, t_prime).map(|v| v.to_string()).map_err(|e| JsError::new(&e))
    }
}
