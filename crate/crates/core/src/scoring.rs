//! Pixel and feature distance maps, their calibrated combination, Gaussian
//! smoothing and image-level scores.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{DdadError, Result};
use crate::features::{check_layers, patch_aggregate, reflect_index, FeatureExtractor};
use crate::image::ImageTensor;
use crate::nn::cosine_map;
use crate::reconstruct::{reconstruct_batch, ReconstructionConfig};
use crate::schedule::VarianceSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Maxima taken over every image of the evaluation run.
    #[default]
    EvalSet,
    PerImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PixelOnly,
    FeatureOnly,
    Combined,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [Provenance::PixelOnly, Provenance::FeatureOnly, Provenance::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Self::PixelOnly => "pixel",
            Self::FeatureOnly => "feature",
            Self::Combined => "combined",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub v: f64,
    pub layer_set_score: Vec<usize>,
    pub sigma_g: f64,
    pub normalization_scope: NormScope,
    /// Patch aggregation window applied to feature maps.
    pub window: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { v: 1.0, layer_set_score: vec![2, 3], sigma_g: 4.0, normalization_scope: NormScope::EvalSet, window: 3 }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        check_layers(&self.layer_set_score)?;
        if !(self.v >= 0.0) || !(self.sigma_g >= 0.0) || self.window % 2 == 0 {
            return Err(DdadError::InvalidConfig(format!(
                "scoring needs v >= 0, sigma_g >= 0 and an odd window; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyHeatmap {
    pub map: Array2<f64>,
    pub image_score: f64,
    pub provenance: Provenance,
}

impl AnomalyHeatmap {
    /// Wraps a map; `image_score` is its maximum.
    pub fn new(map: Array2<f64>, provenance: Provenance) -> Self {
        let image_score = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { map, image_score, provenance }
    }
}

/// Per-pixel mean over channels of `|x0 - y|`.
pub fn pixel_distance(x0: &ImageTensor, y: &ImageTensor) -> Result<Array2<f64>> {
    x0.channel_mean_abs_diff(y)
}

/// Bilinear resize with half-pixel centres (`align_corners = false`).
pub fn upsample_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let axis = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, out_w, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, ly) = axis(y, out_h, h);
        let (x0, x1, lx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - lx) + src[[y0, x1]] * lx;
        let bot = src[[y1, x0]] * (1.0 - lx) + src[[y1, x1]] * lx;
        top * (1.0 - ly) + bot * ly
    })
}

/// Feature distance maps for a batch of pairs, each at input resolution:
/// for every scoring layer, patch-aggregate both feature maps, take
/// `1 - cos` per position, upsample, and sum over layers.
pub fn feature_distance_batch(
    x0: &[ImageTensor],
    y: &[ImageTensor],
    fe: &FeatureExtractor,
    cfg: &ScoreConfig,
) -> Result<Vec<Array2<f64>>> {
    if x0.len() != y.len() {
        return Err(DdadError::InvalidConfig("one target per reconstruction".into()));
    }
    let Some(first) = x0.first() else { return Ok(Vec::new()) };
    let (h, w) = (first.height(), first.width());
    let mut out = vec![Array2::<f64>::zeros((h, w)); x0.len()];
    let fa = fe.extract_batch(x0, &cfg.layer_set_score)?;
    let fb = fe.extract_batch(y, &cfg.layer_set_score)?;
    for (ma, mb) in fa.maps.iter().zip(&fb.maps) {
        let ma = patch_aggregate(ma, cfg.window)?;
        let mb = patch_aggregate(mb, cfg.window)?;
        let (_, _, fh, fw) = ma.dims4();
        let cos = cosine_map(&ma, &mb);
        for (i, acc) in out.iter_mut().enumerate() {
            let grid = Array2::from_shape_fn((fh, fw), |(r, c)| 1.0 - cos[i * fh * fw + r * fw + c] as f64);
            *acc += &upsample_bilinear(&grid, h, w);
        }
    }
    for m in &mut out {
        // 1 - cos can dip a hair below zero in f32
        m.mapv_inplace(|v| v.max(0.0));
    }
    Ok(out)
}

pub fn feature_distance(x0: &ImageTensor, y: &ImageTensor, fe: &FeatureExtractor, cfg: &ScoreConfig) -> Result<Array2<f64>> {
    x0.same_shape(y)?;
    Ok(feature_distance_batch(std::slice::from_ref(x0), std::slice::from_ref(y), fe, cfg)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub max_dp: f64,
    pub max_df: f64,
}

fn max_of(m: &Array2<f64>) -> f64 {
    m.iter().copied().fold(0.0, f64::max)
}

impl NormStats {
    pub fn of(dp: &Array2<f64>, df: &Array2<f64>) -> Self {
        Self { max_dp: max_of(dp), max_df: max_of(df) }
    }

    pub fn merge(self, o: Self) -> Self {
        Self { max_dp: self.max_dp.max(o.max_dp), max_df: self.max_df.max(o.max_df) }
    }

    /// Weight on `D_p` that gives the pixel term the upper bound `v * max_df`.
    /// `None` when `max_dp == 0`.
    pub fn pixel_scale(&self, v: f64) -> Option<f64> {
        (self.max_dp > 0.0).then(|| v * self.max_df / self.max_dp)
    }
}

/// `(v * max_df / max_dp) * dp + df`. With `max_dp == 0` the pixel term is
/// dropped and `df` returned.
pub fn combine(dp: &Array2<f64>, df: &Array2<f64>, cfg: &ScoreConfig, stats: NormStats) -> Result<Array2<f64>> {
    if dp.dim() != df.dim() {
        return Err(DdadError::ShapeMismatch {
            expected: vec![dp.dim().0, dp.dim().1],
            got: vec![df.dim().0, df.dim().1],
        });
    }
    match stats.pixel_scale(cfg.v) {
        Some(k) => Ok(dp * k + df),
        None => {
            log::warn!("pixel distance is zero everywhere in the normalisation scope; using the feature term alone");
            Ok(df.clone())
        }
    }
}

/// Discrete Gaussian weights on `-r..=r`, `r = floor(4 sigma + 0.5)`, summing to 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma + 0.5) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with symmetric (half-sample) boundary reflection.
/// `sigma_g == 0` returns the input unchanged.
pub fn smooth(map: &Array2<f64>, sigma_g: f64) -> Array2<f64> {
    if sigma_g <= 0.0 {
        return map.clone();
    }
    let k = gaussian_kernel(sigma_g);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.dim();
    let tmp = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter().enumerate().map(|(i, kv)| kv * map[[y, reflect_index(x as isize + i as isize - r, w)]]).sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter().enumerate().map(|(i, kv)| kv * tmp[[reflect_index(y as isize + i as isize - r, h), x]]).sum::<f64>()
    })
}

/// Unsmoothed distance maps of one reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMaps {
    pub dp: Array2<f64>,
    pub df: Array2<f64>,
}

pub fn distance_maps(
    x0: &[ImageTensor],
    y: &[ImageTensor],
    fe: &FeatureExtractor,
    cfg: &ScoreConfig,
) -> Result<Vec<DistanceMaps>> {
    cfg.validate()?;
    let dfs = feature_distance_batch(x0, y, fe, cfg)?;
    x0.iter()
        .zip(y)
        .zip(dfs)
        .map(|((a, b), df)| Ok(DistanceMaps { dp: pixel_distance(a, b)?, df }))
        .collect()
}

/// Normalisation statistics for each image under `scope`.
pub fn norm_stats(maps: &[DistanceMaps], scope: NormScope) -> Vec<NormStats> {
    let each: Vec<NormStats> = maps.iter().map(|m| NormStats::of(&m.dp, &m.df)).collect();
    match scope {
        NormScope::PerImage => each,
        NormScope::EvalSet => {
            let all = each.iter().copied().fold(NormStats { max_dp: 0.0, max_df: 0.0 }, NormStats::merge);
            vec![all; maps.len()]
        }
    }
}

/// Final heatmaps for one provenance: combine (or select) terms, then smooth.
pub fn heatmaps(maps: &[DistanceMaps], cfg: &ScoreConfig, provenance: Provenance) -> Result<Vec<AnomalyHeatmap>> {
    let stats = norm_stats(maps, cfg.normalization_scope);
    maps.iter()
        .zip(stats)
        .map(|(m, st)| {
            let raw = match provenance {
                Provenance::PixelOnly => m.dp.clone(),
                Provenance::FeatureOnly => m.df.clone(),
                Provenance::Combined => combine(&m.dp, &m.df, cfg, st)?,
            };
            Ok(AnomalyHeatmap::new(smooth(&raw, cfg.sigma_g), provenance))
        })
        .collect()
}

/// `|max over scope of (scale * D_p) - v * max D_f|`, the largest over all
/// scopes of the run. Zero up to rounding whenever `max_dp > 0`.
pub fn calibration_gap(maps: &[DistanceMaps], cfg: &ScoreConfig) -> f64 {
    let stats = norm_stats(maps, cfg.normalization_scope);
    let mut scaled_max: Vec<(f64, NormStats)> = Vec::new();
    match cfg.normalization_scope {
        NormScope::PerImage => {
            for (m, st) in maps.iter().zip(&stats) {
                if let Some(k) = st.pixel_scale(cfg.v) {
                    scaled_max.push(((&m.dp * k).iter().copied().fold(0.0, f64::max), *st));
                }
            }
        }
        NormScope::EvalSet => {
            if let Some(st) = stats.first() {
                if let Some(k) = st.pixel_scale(cfg.v) {
                    let mx = maps.iter().map(|m| (&m.dp * k).iter().copied().fold(0.0, f64::max)).fold(0.0, f64::max);
                    scaled_max.push((mx, *st));
                }
            }
        }
    }
    scaled_max.iter().map(|(mx, st)| (mx - cfg.v * st.max_df).abs()).fold(0.0, f64::max)
}

/// Reconstructs each image with `y := x` and returns the distance maps and
/// reconstructions.
pub fn reconstruct_and_measure<D: Denoiser + ?Sized>(
    images: &[ImageTensor],
    m: &D,
    fe: &FeatureExtractor,
    rcfg: &ReconstructionConfig,
    scfg: &ScoreConfig,
    s: &VarianceSchedule,
) -> Result<(Vec<ImageTensor>, Vec<DistanceMaps>)> {
    let x0 = reconstruct_batch(m, images, images, rcfg, s)?;
    let maps = distance_maps(&x0, images, fe, scfg)?;
    Ok((x0, maps))
}

/// Combined heatmap of a single image (its own normalisation scope).
pub fn score_image<D: Denoiser + ?Sized>(
    x: &ImageTensor,
    m: &D,
    fe: &FeatureExtractor,
    rcfg: &ReconstructionConfig,
    scfg: &ScoreConfig,
    s: &VarianceSchedule,
) -> Result<AnomalyHeatmap> {
    let (_, maps) = reconstruct_and_measure(std::slice::from_ref(x), m, fe, rcfg, scfg, s)?;
    Ok(heatmaps(&maps, scfg, Provenance::Combined)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn combine_examples() {
        let cfg = ScoreConfig::default();
        let dp = array![[2.0, 1.0], [0.0, 0.5]];
        let df = array![[0.5, 0.1], [0.2, 0.0]];
        let st = NormStats::of(&dp, &df);
        assert_eq!(st.pixel_scale(1.0), Some(0.25));
        let d = combine(&dp, &df, &cfg, st).unwrap();
        assert_eq!(d, array![[1.0, 0.35], [0.2, 0.125]]);
        let v0 = ScoreConfig { v: 0.0, ..cfg.clone() };
        assert_eq!(combine(&dp, &df, &v0, st).unwrap(), df);
        let zero = Array2::zeros((2, 2));
        assert_eq!(combine(&zero, &df, &cfg, NormStats::of(&zero, &df)).unwrap(), df);
    }

    #[test]
    fn smoothing_identities() {
        let m = Array2::from_shape_fn((9, 7), |(y, x)| (y * 7 + x) as f64);
        assert_eq!(smooth(&m, 0.0), m);
        let c = Array2::from_elem((20, 13), 2.5);
        assert!(smooth(&c, 4.0).iter().all(|v| (v - 2.5).abs() < 1e-9));
        let k = gaussian_kernel(4.0);
        assert_eq!(k.len(), 33);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_half_pixel_convention() {
        let src = array![[0.0, 1.0], [2.0, 3.0]];
        let up = upsample_bilinear(&src, 4, 4);
        // first output centre maps to -0.25, clamped to 0
        assert_eq!(up[[0, 0]], 0.0);
        assert!((up[[0, 1]] - 0.25).abs() < 1e-12);
        assert!((up[[1, 1]] - 0.75).abs() < 1e-12);
        assert_eq!(up[[3, 3]], 3.0);
        assert_eq!(upsample_bilinear(&src, 2, 2), src);
    }

    #[test]
    fn heatmap_score_is_the_max() {
        let h = AnomalyHeatmap::new(array![[0.1, 0.7], [0.3, 0.2]], Provenance::Combined);
        assert_eq!(h.image_score, 0.7);
    }
}
