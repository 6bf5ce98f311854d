//! Procedural textures with localised synthetic defects and exact masks.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Item, Split};
use crate::error::{DdadError, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Stripes,
    Checker,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectType {
    Patch,
    ColorSpot,
    Scratch,
}

impl DefectType {
    pub fn name(self) -> &'static str {
        match self {
            Self::Patch => "patch",
            Self::ColorSpot => "color_spot",
            Self::Scratch => "scratch",
        }
    }
}

/// Bounds on the defect area as a fraction of the image.
pub const MASK_AREA: (f64, f64) = (0.01, 0.10);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_train: usize,
    /// Test images per class (nominal and defective each).
    pub n_test: usize,
    pub pattern: Pattern,
    pub defect_types: Vec<DefectType>,
    pub resolution: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n_train: 200, n_test: 50, pattern: Pattern::Stripes, defect_types: vec![DefectType::Patch], resolution: 64 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.resolution, 32 | 64) {
            return Err(DdadError::InvalidConfig(format!("synthetic resolution must be 32 or 64, got {}", self.resolution)));
        }
        if self.n_train < 16 {
            return Err(DdadError::InvalidConfig(format!("need at least 16 training images, got {}", self.n_train)));
        }
        if self.defect_types.is_empty() {
            return Err(DdadError::InvalidConfig("at least one defect type".into()));
        }
        Ok(())
    }
}

type Rgb = [f64; 3];

const STRIPE_COLORS: (Rgb, Rgb) = ([-0.6, -0.2, 0.5], [0.7, 0.5, -0.3]);
const CHECKER_COLORS: (Rgb, Rgb) = ([-0.5, -0.5, -0.5], [0.6, 0.4, 0.2]);
const BLOB_BACKGROUND: Rgb = [-0.4, 0.1, -0.2];
const BLOB_COLOR: Rgb = [0.6, -0.3, 0.4];

fn jitter(rng: &mut ChaCha8Rng, c: Rgb, amount: f64) -> Rgb {
    c.map(|v| v + rng.random_range(-amount..amount))
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
}

/// Nominal texture parameters; the defect generator reuses the field to
/// paint patches with a different orientation.
struct Texture {
    pattern: Pattern,
    angle: f64,
    freq: f64,
    phase: f64,
    colors: (Rgb, Rgb),
    blobs: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn sample(pattern: Pattern, res: usize, rng: &mut ChaCha8Rng) -> Self {
        let (a, b) = match pattern {
            Pattern::Stripes => STRIPE_COLORS,
            Pattern::Checker => CHECKER_COLORS,
            Pattern::Blobs => (BLOB_BACKGROUND, BLOB_COLOR),
        };
        let colors = (jitter(rng, a, 0.08), jitter(rng, b, 0.08));
        let blobs = match pattern {
            Pattern::Blobs => {
                let n = rng.random_range(6..=9);
                (0..n)
                    .map(|_| {
                        let r = res as f64;
                        (rng.random_range(0.0..r), rng.random_range(0.0..r), rng.random_range(0.07..0.11) * r)
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        Self {
            pattern,
            angle: rng.random_range(-0.08..0.08),
            freq: 6.0 + rng.random_range(-0.4..0.4),
            phase: rng.random_range(0.0..2.0 * PI),
            colors,
            blobs,
        }
    }

    /// Mixing weight in `[0, 1]` at pixel centre `(y, x)`.
    fn weight(&self, y: f64, x: f64, res: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        match self.pattern {
            Pattern::Stripes => {
                let u = (x * c + y * s) / res;
                0.5 + 0.5 * (2.0 * PI * self.freq * u + self.phase).sin()
            }
            Pattern::Checker => {
                let u = (x * c + y * s) / res;
                let v = (-x * s + y * c) / res;
                let k = 2.0 * PI * self.freq / 2.0;
                let p = (k * u + self.phase).sin() * (k * v + self.phase).sin();
                0.5 + 0.5 * (4.0 * p).tanh()
            }
            Pattern::Blobs => {
                let m: f64 = self
                    .blobs
                    .iter()
                    .map(|&(by, bx, r)| (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * r * r)).exp())
                    .sum();
                m.min(1.0)
            }
        }
    }

    fn render(&self, res: usize) -> Array3<f64> {
        let r = res as f64;
        let mut img = Array3::zeros((3, res, res));
        for y in 0..res {
            for x in 0..res {
                let t = self.weight(y as f64 + 0.5, x as f64 + 0.5, r);
                let col = mix(self.colors.0, self.colors.1, t);
                for k in 0..3 {
                    img[[k, y, x]] = col[k];
                }
            }
        }
        img
    }
}

fn to_image(a: Array3<f64>) -> ImageTensor {
    ImageTensor::from_array(a.mapv(|v| v.clamp(-1.0, 1.0) as f32))
}

fn area_ok(mask: &Array2<bool>) -> bool {
    let frac = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
    frac >= MASK_AREA.0 && frac <= MASK_AREA.1
}

/// Paints one defect into `img` and returns its mask. Resamples geometry
/// until the mask area lies within [`MASK_AREA`].
fn paint_defect(img: &mut Array3<f64>, tex: &Texture, kind: DefectType, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let res = img.dim().1;
    let r = res as f64;
    loop {
        let mut mask = Array2::from_elem((res, res), false);
        match kind {
            DefectType::Patch => {
                let hh = rng.random_range(0.13..0.29) * r;
                let ww = rng.random_range(0.13..0.29) * r;
                let y0 = rng.random_range(0.0..r - hh);
                let x0 = rng.random_range(0.0..r - ww);
                // same texture turned by a quarter, recoloured
                let other = Texture {
                    angle: tex.angle + PI / 2.0,
                    phase: rng.random_range(0.0..2.0 * PI),
                    colors: (jitter(rng, tex.colors.1, 0.15), jitter(rng, tex.colors.0, 0.15)),
                    blobs: tex.blobs.clone(),
                    ..*tex
                };
                for y in 0..res {
                    for x in 0..res {
                        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                        if py >= y0 && py < y0 + hh && px >= x0 && px < x0 + ww {
                            mask[[y, x]] = true;
                            let col = mix(other.colors.0, other.colors.1, other.weight(py, px, r));
                            for k in 0..3 {
                                img[[k, y, x]] = col[k];
                            }
                        }
                    }
                }
            }
            DefectType::ColorSpot => {
                let rad = rng.random_range(0.07..0.17) * r;
                let cy = rng.random_range(rad..r - rad);
                let cx = rng.random_range(rad..r - rad);
                let shift = [0, 1, 2].map(|_| if rng.random_bool(0.5) { 0.7 } else { -0.7 });
                for y in 0..res {
                    for x in 0..res {
                        let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                        if d <= rad {
                            mask[[y, x]] = true;
                            for k in 0..3 {
                                img[[k, y, x]] += shift[k];
                            }
                        }
                    }
                }
            }
            DefectType::Scratch => {
                let len = rng.random_range(0.35..0.7) * r;
                let theta = rng.random_range(0.0..PI);
                let (dy, dx) = (theta.sin(), theta.cos());
                let cy = rng.random_range(0.25 * r..0.75 * r);
                let cx = rng.random_range(0.25 * r..0.75 * r);
                let half_width = 1.1;
                let value = if rng.random_bool(0.5) { 0.95 } else { -0.95 };
                for y in 0..res {
                    for x in 0..res {
                        let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        let along = py * dy + px * dx;
                        let across = (px * dy - py * dx).abs();
                        if along.abs() <= len / 2.0 && across <= half_width {
                            mask[[y, x]] = true;
                            for k in 0..3 {
                                img[[k, y, x]] = value;
                            }
                        }
                    }
                }
            }
        }
        if area_ok(&mask) {
            return mask;
        }
        // geometry fell outside the bounds: restore and retry
        let clean = tex.render(res);
        ndarray::Zip::from(&mut *img).and(&clean).for_each(|d, &c| *d = c);
    }
}

fn item_seed(seed: u64, split: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (split << 56) ^ index as u64
}

/// Generates a dataset deterministically from `seed`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let res = spec.resolution;
    let mut items = Vec::new();
    let nominal = |split: Split, tag: u64, i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, tag, i));
        let tex = Texture::sample(spec.pattern, res, &mut rng);
        let id = format!("{}/{i:04}", match split {
            Split::TrainGood => "train/good",
            _ => "test/good",
        });
        Item { id, image: to_image(tex.render(res)), split, defect_type: "good".into(), mask: Array2::from_elem((res, res), false) }
    };
    for i in 0..spec.n_train {
        items.push(nominal(Split::TrainGood, 1, i));
    }
    for i in 0..spec.n_test {
        items.push(nominal(Split::TestGood, 2, i));
    }
    for i in 0..spec.n_test {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, 3, i));
        let tex = Texture::sample(spec.pattern, res, &mut rng);
        let kind = spec.defect_types[i % spec.defect_types.len()];
        let mut img = tex.render(res);
        let mask = paint_defect(&mut img, &tex, kind, &mut rng);
        items.push(Item {
            id: format!("test/{}/{i:04}", kind.name()),
            image: to_image(img),
            split: Split::TestDefect,
            defect_type: kind.name().into(),
            mask,
        });
    }
    let category = format!("synthetic-{}", match spec.pattern {
        Pattern::Stripes => "stripes",
        Pattern::Checker => "checker",
        Pattern::Blobs => "blobs",
    });
    let ds = Dataset { category, resolution: res, items };
    ds.validate()?;
    Ok(ds)
}

/// The nominal texture underlying defect item `index`, without the defect.
/// Useful as a clean reference for reconstruction quality.
pub fn clean_reference(spec: &SynthSpec, seed: u64, index: usize) -> Result<ImageTensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, 3, index));
    Ok(to_image(Texture::sample(spec.pattern, spec.resolution, &mut rng).render(spec.resolution)))
}
