//! Image AUROC, pixel AUROC and the per-region-overlap (PRO) curve.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DdadError, Result};

/// Area under the ROC curve of `pos` against `neg`, ties counting one half
/// (the normalised Mann-Whitney U statistic).
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(DdadError::Metric(format!("auroc needs both classes ({} positive, {} negative)", pos.len(), neg.len())));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(DdadError::Metric("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of mid-ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

fn check_pairs(heatmaps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<()> {
    if heatmaps.len() != masks.len() || heatmaps.is_empty() {
        return Err(DdadError::Metric(format!("{} heatmaps vs {} masks", heatmaps.len(), masks.len())));
    }
    for (h, m) in heatmaps.iter().zip(masks) {
        if h.dim() != m.dim() {
            return Err(DdadError::ShapeMismatch { expected: vec![m.dim().0, m.dim().1], got: vec![h.dim().0, h.dim().1] });
        }
    }
    Ok(())
}

fn split_pixels<'a>(heatmaps: impl Iterator<Item = (&'a Array2<f64>, &'a Array2<bool>)>) -> (Vec<f64>, Vec<f64>) {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (h, m) in heatmaps {
        for (&v, &a) in h.iter().zip(m.iter()) {
            if a { pos.push(v) } else { neg.push(v) }
        }
    }
    (pos, neg)
}

/// AUROC over the pooled pixel population of all images.
pub fn pixel_auroc(heatmaps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<f64> {
    check_pairs(heatmaps, masks)?;
    let (pos, neg) = split_pixels(heatmaps.iter().zip(masks));
    if pos.is_empty() || neg.is_empty() {
        return Err(DdadError::Metric("pooled masks are all anomalous or all normal".into()));
    }
    auroc(&pos, &neg)
}

/// Mean of per-image pixel AUROCs over images that contain both classes.
pub fn pixel_auroc_per_image(heatmaps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<f64> {
    check_pairs(heatmaps, masks)?;
    let mut vals = Vec::new();
    for (h, m) in heatmaps.iter().zip(masks) {
        let (pos, neg) = split_pixels(std::iter::once((h, m)));
        if !pos.is_empty() && !neg.is_empty() {
            vals.push(auroc(&pos, &neg)?);
        }
    }
    if vals.is_empty() {
        return Err(DdadError::Metric("no image contains both anomalous and normal pixels".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// 4-connected component labels (0 = background, components `1..=count`).
pub fn label_components(mask: &Array2<bool>) -> (Array2<usize>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::zeros((h, w));
    let mut count = 0;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            count += 1;
            labels[[y, x]] = count;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                let mut visit = |ny: usize, nx: usize| {
                    if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = count;
                        queue.push_back((ny, nx));
                    }
                };
                if cy > 0 {
                    visit(cy - 1, cx);
                }
                if cy + 1 < h {
                    visit(cy + 1, cx);
                }
                if cx > 0 {
                    visit(cy, cx - 1);
                }
                if cx + 1 < w {
                    visit(cy, cx + 1);
                }
            }
        }
    }
    (labels, count)
}

/// Points `(fpr, mean per-region overlap)` for descending thresholds,
/// starting at `(0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProCurve {
    pub fpr: Vec<f64>,
    pub pro: Vec<f64>,
}

impl ProCurve {
    /// Trapezoidal area under the curve on `[0, fpr_limit]`, linearly
    /// interpolating at the limit. Not normalised.
    pub fn area(&self, fpr_limit: f64) -> f64 {
        let mut area = 0.0;
        for k in 1..self.fpr.len() {
            let (x0, x1) = (self.fpr[k - 1], self.fpr[k]);
            let (y0, y1) = (self.pro[k - 1], self.pro[k]);
            if x0 >= fpr_limit {
                break;
            }
            if x1 <= fpr_limit {
                area += (x1 - x0) * (y0 + y1) / 2.0;
            } else {
                let y = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
                area += (fpr_limit - x0) * (y0 + y) / 2.0;
                break;
            }
        }
        area
    }
}

/// Per-region data shared by the exact and binned sweeps.
struct Regions {
    /// (score, component index) of every anomalous pixel.
    anomalous: Vec<(f64, usize)>,
    sizes: Vec<usize>,
    normal: Vec<f64>,
}

fn regions(heatmaps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<Regions> {
    check_pairs(heatmaps, masks)?;
    let mut r = Regions { anomalous: Vec::new(), sizes: Vec::new(), normal: Vec::new() };
    for (h, m) in heatmaps.iter().zip(masks) {
        let (labels, count) = label_components(m);
        let base = r.sizes.len();
        r.sizes.extend(std::iter::repeat_n(0, count));
        for (&v, &l) in h.iter().zip(labels.iter()) {
            if l == 0 {
                r.normal.push(v);
            } else {
                r.anomalous.push((v, base + l - 1));
                r.sizes[base + l - 1] += 1;
            }
        }
    }
    if r.sizes.is_empty() {
        return Err(DdadError::Metric("no anomalous components in the masks".into()));
    }
    if r.normal.is_empty() {
        return Err(DdadError::Metric("no normal pixels to measure false positives".into()));
    }
    Ok(r)
}

fn sweep(r: &Regions, thresholds: &[f64]) -> ProCurve {
    // thresholds descending; a pixel is flagged when score >= threshold
    let mut anom = r.anomalous.clone();
    anom.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut normal = r.normal.clone();
    normal.sort_by(|a, b| b.total_cmp(a));
    let inv: Vec<f64> = r.sizes.iter().map(|&s| 1.0 / s as f64).collect();
    let ncomp = r.sizes.len() as f64;
    let mut overlap_sum = 0.0;
    let (mut ia, mut inn) = (0, 0);
    let mut curve = ProCurve { fpr: vec![0.0], pro: vec![0.0] };
    for &t in thresholds {
        while ia < anom.len() && anom[ia].0 >= t {
            overlap_sum += inv[anom[ia].1];
            ia += 1;
        }
        while inn < normal.len() && normal[inn] >= t {
            inn += 1;
        }
        curve.fpr.push(inn as f64 / normal.len() as f64);
        curve.pro.push(overlap_sum / ncomp);
    }
    curve
}

/// Exact curve: every distinct score is a threshold.
pub fn pro_curve(heatmaps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<ProCurve> {
    let r = regions(heatmaps, masks)?;
    let mut th: Vec<f64> = r.anomalous.iter().map(|a| a.0).chain(r.normal.iter().copied()).collect();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    Ok(sweep(&r, &th))
}

/// Approximate curve on `bins` equal-width thresholds between the minimum
/// and maximum score.
pub fn pro_curve_binned(heatmaps: &[Array2<f64>], masks: &[Array2<bool>], bins: usize) -> Result<ProCurve> {
    let r = regions(heatmaps, masks)?;
    let all = || r.anomalous.iter().map(|a| a.0).chain(r.normal.iter().copied());
    let lo = all().fold(f64::INFINITY, f64::min);
    let hi = all().fold(f64::NEG_INFINITY, f64::max);
    let bins = bins.max(1);
    let th: Vec<f64> = (0..=bins).rev().map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect();
    Ok(sweep(&r, &th))
}

fn check_limit(fpr_limit: f64) -> Result<()> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(DdadError::Metric(format!("fpr_limit must lie in (0, 1], got {fpr_limit}")));
    }
    Ok(())
}

/// Normalised area under the PRO curve up to `fpr_limit`.
pub fn pro(heatmaps: &[Array2<f64>], masks: &[Array2<bool>], fpr_limit: f64) -> Result<f64> {
    check_limit(fpr_limit)?;
    Ok(pro_curve(heatmaps, masks)?.area(fpr_limit) / fpr_limit)
}

pub fn pro_binned(heatmaps: &[Array2<f64>], masks: &[Array2<bool>], fpr_limit: f64, bins: usize) -> Result<f64> {
    check_limit(fpr_limit)?;
    Ok(pro_curve_binned(heatmaps, masks, bins)?.area(fpr_limit) / fpr_limit)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PixelAurocMode {
    #[default]
    Pooled,
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub fpr_limit: f64,
    pub pixel_auroc_mode: PixelAurocMode,
    /// `Some(n)` uses the binned PRO approximation.
    pub pro_bins: Option<usize>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { fpr_limit: 0.3, pixel_auroc_mode: PixelAurocMode::Pooled, pro_bins: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageScore {
    pub id: String,
    pub image_score: f64,
    /// `true` for defective images.
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro: f64,
    pub per_image: Vec<PerImageScore>,
    pub config_hash: String,
}

impl EvaluationReport {
    pub fn all_finite(&self) -> bool {
        [self.image_auroc, self.pixel_auroc, self.pro].iter().all(|v| v.is_finite())
    }
}

/// Computes all three metrics. `masks[i]` must be empty (all false) for
/// nominal images.
pub fn evaluate(
    per_image: Vec<PerImageScore>,
    heatmaps: &[Array2<f64>],
    masks: &[Array2<bool>],
    opts: &MetricOptions,
    config_hash: String,
) -> Result<EvaluationReport> {
    if per_image.is_empty() {
        return Err(DdadError::Metric("nothing to evaluate".into()));
    }
    let pos: Vec<f64> = per_image.iter().filter(|p| p.label).map(|p| p.image_score).collect();
    let neg: Vec<f64> = per_image.iter().filter(|p| !p.label).map(|p| p.image_score).collect();
    let image_auroc = auroc(&pos, &neg)?;
    let pixel_auroc = match opts.pixel_auroc_mode {
        PixelAurocMode::Pooled => pixel_auroc(heatmaps, masks)?,
        PixelAurocMode::PerImage => pixel_auroc_per_image(heatmaps, masks)?,
    };
    let pro = match opts.pro_bins {
        None => pro(heatmaps, masks, opts.fpr_limit)?,
        Some(b) => pro_binned(heatmaps, masks, opts.fpr_limit, b)?,
    };
    Ok(EvaluationReport { image_auroc, pixel_auroc, pro, per_image, config_hash })
}
