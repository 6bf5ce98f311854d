//! In-memory orchestration of train, finetune, detect, evaluate and ablate.
//! Persistence and the run directory live in the command-line front end.

use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_mvtec, resolve_data_root, Dataset, Item, DATA_ROOT_ENV};
use crate::denoiser::{train, Denoiser, DenoiserModel, TrainConfig, UNetConfig};
use crate::error::{DdadError, Result};
use crate::features::{adapt, BackboneKind, DomainAdaptConfig, FeatureExtractor};
use crate::image::ImageTensor;
use crate::metrics::{self, EvaluationReport, MetricOptions, PerImageScore};
use crate::reconstruct::ReconstructionConfig;
use crate::schedule::{ScheduleConfig, VarianceSchedule};
use crate::scoring::{
    calibration_gap, distance_maps, heatmaps, AnomalyHeatmap, DistanceMaps, Provenance, ScoreConfig,
};
use crate::synth::{synth_dataset, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    /// MVTec directory layout under the data root, optionally center-cropped
    /// after resizing.
    Mvtec {
        resolution: usize,
        #[serde(default)]
        crop: Option<usize>,
    },
}

impl DataSource {
    /// `(resolution, crop)` that images are brought to.
    pub fn geometry(&self) -> (usize, Option<usize>) {
        match self {
            DataSource::Synthetic(spec) => (spec.resolution, None),
            DataSource::Mvtec { resolution, crop } => (*resolution, *crop),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    /// Root of on-disk datasets. Unused for synthetic data.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    pub runs_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_root: None, runs_dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub paths: Paths,
    pub category: String,
    pub seed: u64,
    pub data: DataSource,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub backbone: BackboneKind,
    pub adapt: DomainAdaptConfig,
    pub reconstruction: ReconstructionConfig,
    pub score: ScoreConfig,
    pub metrics: MetricOptions,
}

impl PipelineConfig {
    /// Desk-scale synthetic setup: stripes with patch defects at 64x64,
    /// DDAD-10 from `T' = 250`, `w = 3`, `v = 1`.
    pub fn synthetic_default() -> Self {
        Self {
            paths: Paths::default(),
            category: "synthetic-stripes".into(),
            seed: 0,
            data: DataSource::Synthetic(SynthSpec::default()),
            schedule: ScheduleConfig::default(),
            unet: UNetConfig::desk(),
            train: TrainConfig { learning_rate: 1e-3, weight_decay: 0.0, batch_size: 8, epochs: 8, seed: 0 },
            backbone: BackboneKind::ToyCnn,
            adapt: DomainAdaptConfig { epochs: 2, ..DomainAdaptConfig::default() },
            reconstruction: ReconstructionConfig::default(),
            score: ScoreConfig::default(),
            metrics: MetricOptions::default(),
        }
    }

    /// MVTec category preset with the published per-category guidance weight
    /// and epochs. Unknown categories fall back to `w = 3`.
    pub fn mvtec(category: &str, resolution: usize, crop: Option<usize>) -> Self {
        let base = Self::synthetic_default();
        let rep = mvtec_replication(category).unwrap_or(MvtecSetting { w: 3.0, train_epochs: 1000, fe_epochs: 2 });
        Self {
            category: category.into(),
            data: DataSource::Mvtec { resolution, crop },
            backbone: BackboneKind::ResNetLite,
            train: TrainConfig { epochs: rep.train_epochs, ..base.train },
            adapt: DomainAdaptConfig { epochs: rep.fe_epochs, lambda_dl: 0.1, ..base.adapt },
            reconstruction: ReconstructionConfig { w: rep.w, ..base.reconstruction },
            score: ScoreConfig { v: 1.0, ..base.score },
            ..base
        }
    }

    /// Re-derives every sub-seed from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.adapt.seed = seed.wrapping_add(1);
        self.reconstruction.seed = seed.wrapping_add(2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = VarianceSchedule::new(self.schedule)?;
        self.unet.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        self.reconstruction.validate(s.timesteps())?;
        self.score.validate()?;
        match &self.data {
            DataSource::Synthetic(spec) => spec.validate()?,
            DataSource::Mvtec { resolution, crop } => {
                if *resolution == 0 || crop.is_some_and(|c| c == 0 || c > *resolution) {
                    return Err(DdadError::InvalidConfig(format!("mvtec resolution {resolution} with crop {crop:?}")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (paths excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn variance_schedule(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::new(self.schedule)
    }

    /// Generates or loads the configured dataset.
    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(spec) => synth_dataset(spec, self.seed),
            DataSource::Mvtec { resolution, crop } => {
                let root = resolve_data_root(self.paths.data_root.as_deref()).ok_or_else(|| {
                    DdadError::InvalidConfig(format!("no data root: set paths.data_root or {DATA_ROOT_ENV}"))
                })?;
                load_mvtec(&root, &self.category, *resolution, *crop)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MvtecSetting {
    pub w: f64,
    pub train_epochs: usize,
    pub fe_epochs: usize,
}

/// Published per-category settings for MVTec.
pub fn mvtec_replication(category: &str) -> Option<MvtecSetting> {
    const TABLE: [(&str, f64, usize, usize); 15] = [
        ("carpet", 0.0, 2500, 0),
        ("grid", 4.0, 2000, 6),
        ("leather", 11.0, 2000, 8),
        ("tile", 4.0, 1000, 0),
        ("wood", 11.0, 2000, 16),
        ("bottle", 3.0, 1000, 5),
        ("cable", 3.0, 3000, 0),
        ("capsule", 8.0, 1500, 8),
        ("hazelnut", 5.0, 2000, 3),
        ("metal_nut", 7.0, 3000, 1),
        ("pill", 9.0, 1000, 4),
        ("screw", 2.0, 2000, 4),
        ("toothbrush", 0.0, 2000, 2),
        ("transistor", 0.0, 2000, 0),
        ("zipper", 10.0, 1000, 6),
    ];
    TABLE
        .iter()
        .find(|r| r.0 == category)
        .map(|&(_, w, train_epochs, fe_epochs)| MvtecSetting { w, train_epochs, fe_epochs })
}

/// Trains a fresh denoiser on nominal images.
pub fn train_denoiser(
    cfg: &PipelineConfig,
    images: &[ImageTensor],
    on_step: impl FnMut(usize, f64),
) -> Result<(DenoiserModel, Vec<f64>)> {
    let s = cfg.variance_schedule()?;
    let mut model = DenoiserModel::new(cfg.unet.clone(), cfg.schedule, cfg.seed)?;
    let losses = train(&mut model, images, &s, &cfg.train, on_step)?;
    Ok((model, losses))
}

/// The backbone in its pretrained (pre-adaptation) state.
pub fn pretrained_extractor(cfg: &PipelineConfig) -> FeatureExtractor {
    FeatureExtractor::new(cfg.backbone, cfg.seed)
}

/// Adapts a pretrained extractor to `model`'s reconstructions.
pub fn finetune<D: Denoiser + ?Sized>(
    cfg: &PipelineConfig,
    model: &D,
    images: &[ImageTensor],
    on_step: impl FnMut(usize, f64),
) -> Result<(FeatureExtractor, Vec<f64>)> {
    let s = cfg.variance_schedule()?;
    let mut fe = pretrained_extractor(cfg);
    let losses = adapt(&mut fe, model, images, &s, &cfg.adapt, &cfg.reconstruction, on_step)?;
    Ok((fe, losses))
}

/// Everything produced by scoring a test set.
#[derive(Clone, Debug)]
pub struct Detection {
    pub ids: Vec<String>,
    pub reconstructions: Vec<ImageTensor>,
    pub maps: Vec<DistanceMaps>,
    pub heatmaps: Vec<AnomalyHeatmap>,
    /// Deviation of the scaled pixel maximum from `v * max D_f`.
    pub calibration_gap: f64,
}

/// Reconstructs in chunks so progress can be reported.
pub fn reconstruct_items<D: Denoiser + ?Sized>(
    cfg: &PipelineConfig,
    model: &D,
    images: &[ImageTensor],
    mut on_chunk: impl FnMut(usize, usize),
) -> Result<Vec<ImageTensor>> {
    let s = cfg.variance_schedule()?;
    let mut out = Vec::with_capacity(images.len());
    const CHUNK: usize = 16;
    for (k, chunk) in images.chunks(CHUNK).enumerate() {
        // seeds follow the global index, so chunking does not change results
        let mut rngs: Vec<rand_chacha::ChaCha8Rng> = (0..chunk.len())
            .map(|i| {
                rand::SeedableRng::seed_from_u64(crate::reconstruct::image_seed(cfg.reconstruction.seed, k * CHUNK + i))
            })
            .collect();
        let starts = chunk
            .iter()
            .zip(rngs.iter_mut())
            .map(|(x, r)| crate::reconstruct::noisy_start(x, cfg.reconstruction.t_prime, &s, r))
            .collect::<Result<Vec<_>>>()?;
        out.extend(crate::reconstruct::reconstruct_from(model, starts, chunk, &cfg.reconstruction, &s, &mut rngs, None)?);
        on_chunk(out.len(), images.len());
    }
    Ok(out)
}

/// Scores every test item with `y := x` under `cfg.reconstruction`.
pub fn detect<D: Denoiser + ?Sized>(
    cfg: &PipelineConfig,
    model: &D,
    fe: &FeatureExtractor,
    items: &[&Item],
    on_chunk: impl FnMut(usize, usize),
) -> Result<Detection> {
    let images: Vec<ImageTensor> = items.iter().map(|i| i.image.clone()).collect();
    let recon = reconstruct_items(cfg, model, &images, on_chunk)?;
    detection_from(cfg, fe, items, recon)
}

/// Distance maps and combined heatmaps for given reconstructions.
pub fn detection_from(
    cfg: &PipelineConfig,
    fe: &FeatureExtractor,
    items: &[&Item],
    reconstructions: Vec<ImageTensor>,
) -> Result<Detection> {
    let images: Vec<ImageTensor> = items.iter().map(|i| i.image.clone()).collect();
    let maps = distance_maps(&reconstructions, &images, fe, &cfg.score)?;
    let hm = heatmaps(&maps, &cfg.score, Provenance::Combined)?;
    let gap = calibration_gap(&maps, &cfg.score);
    Ok(Detection {
        ids: items.iter().map(|i| i.id.clone()).collect(),
        reconstructions,
        maps,
        heatmaps: hm,
        calibration_gap: gap,
    })
}

/// Image AUROC, pixel AUROC and PRO for a set of heatmaps.
pub fn evaluate_heatmaps(
    cfg: &PipelineConfig,
    items: &[&Item],
    heatmaps: &[AnomalyHeatmap],
) -> Result<EvaluationReport> {
    if items.len() != heatmaps.len() {
        return Err(DdadError::Metric(format!("{} items but {} heatmaps", items.len(), heatmaps.len())));
    }
    let per_image = items
        .iter()
        .zip(heatmaps)
        .map(|(it, h)| PerImageScore { id: it.id.clone(), image_score: h.image_score, label: it.is_defect() })
        .collect();
    let maps: Vec<Array2<f64>> = heatmaps.iter().map(|h| h.map.clone()).collect();
    let masks: Vec<Array2<bool>> = items.iter().map(|i| i.mask.clone()).collect();
    metrics::evaluate(per_image, &maps, &masks, &cfg.metrics, cfg.hash())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub comparison: String,
    pub variant: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub config_hash: String,
}

impl AblationReport {
    pub fn get(&self, comparison: &str, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.comparison == comparison && r.variant == variant)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:<22} {:>9} {:>9} {:>7}\n", "comparison", "variant", "image", "pixel", "pro");
        for r in &self.rows {
            s += &format!(
                "{:<14} {:<22} {:>9.4} {:>9.4} {:>7.4}\n",
                r.comparison, r.variant, r.image_auroc, r.pixel_auroc, r.pro
            );
        }
        s
    }
}

/// Inputs for [`ablate`] that are expensive to recompute.
pub struct AblationInputs<'a> {
    pub items: &'a [&'a Item],
    /// Reconstructions at the configured `w`.
    pub recon_w: &'a [ImageTensor],
    /// Reconstructions at `w = 0`.
    pub recon_w0: &'a [ImageTensor],
    pub pretrained: &'a FeatureExtractor,
    pub adapted: &'a FeatureExtractor,
}

/// The three comparisons: conditioning on/off (pixel-only), adaptation
/// on/off (feature-only), and pixel / feature / combined.
pub fn ablate(cfg: &PipelineConfig, inp: &AblationInputs<'_>) -> Result<AblationReport> {
    let images: Vec<ImageTensor> = inp.items.iter().map(|i| i.image.clone()).collect();
    let mut rows = Vec::new();
    let mut row = |comparison: &str, variant: String, maps: &[DistanceMaps], prov: Provenance| -> Result<()> {
        let hm = heatmaps(maps, &cfg.score, prov)?;
        let r = evaluate_heatmaps(cfg, inp.items, &hm)?;
        rows.push(AblationRow {
            comparison: comparison.into(),
            variant,
            image_auroc: r.image_auroc,
            pixel_auroc: r.pixel_auroc,
            pro: r.pro,
        });
        Ok(())
    };
    let w = cfg.reconstruction.w;
    let adapted_w = distance_maps(inp.recon_w, &images, inp.adapted, &cfg.score)?;
    let adapted_w0 = distance_maps(inp.recon_w0, &images, inp.adapted, &cfg.score)?;
    let pretrained_w = distance_maps(inp.recon_w, &images, inp.pretrained, &cfg.score)?;

    row("conditioning", "w=0 pixel".into(), &adapted_w0, Provenance::PixelOnly)?;
    row("conditioning", format!("w={w} pixel"), &adapted_w, Provenance::PixelOnly)?;
    row("adaptation", "pretrained feature".into(), &pretrained_w, Provenance::FeatureOnly)?;
    row("adaptation", "adapted feature".into(), &adapted_w, Provenance::FeatureOnly)?;
    for p in Provenance::ALL {
        row("distance", p.name().into(), &adapted_w, p)?;
    }
    Ok(AblationReport { rows, config_hash: cfg.hash() })
}
