//! Datasets with train/test splits and ground-truth masks, and the
//! MVTec-layout loader.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DdadError, Result};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainGood,
    TestGood,
    TestDefect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// Unique within the dataset; a file path for loaded data.
    pub id: String,
    pub image: ImageTensor,
    pub split: Split,
    /// `"good"` for nominal items.
    pub defect_type: String,
    /// Ground truth at image resolution; all false for nominal items.
    pub mask: Array2<bool>,
}

impl Item {
    pub fn is_defect(&self) -> bool {
        self.split == Split::TestDefect
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub category: String,
    pub resolution: usize,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn train_images(&self) -> Vec<ImageTensor> {
        self.split(Split::TrainGood).map(|i| i.image.clone()).collect()
    }

    /// Test items in stored order (nominal and defective).
    pub fn test_items(&self) -> Vec<&Item> {
        self.items.iter().filter(|i| i.split != Split::TrainGood).collect()
    }

    /// Checks split and mask consistency and that no id is shared between
    /// train and test.
    pub fn validate(&self) -> Result<()> {
        let mut train_ids = HashSet::new();
        for it in &self.items {
            let [_, h, w] = it.image.shape();
            if it.mask.dim() != (h, w) {
                return Err(DdadError::Dataset(format!("{}: mask {:?} vs image {h}x{w}", it.id, it.mask.dim())));
            }
            let any = it.mask.iter().any(|&b| b);
            match it.split {
                Split::TrainGood | Split::TestGood if any => {
                    return Err(DdadError::Dataset(format!("{}: nominal item with a non-empty mask", it.id)));
                }
                Split::TestDefect if !any => {
                    return Err(DdadError::Dataset(format!("{}: defect item with an empty mask", it.id)));
                }
                _ => {}
            }
            if it.split == Split::TrainGood {
                train_ids.insert(it.id.as_str());
            }
        }
        if let Some(leak) = self.items.iter().find(|i| i.split != Split::TrainGood && train_ids.contains(i.id.as_str())) {
            return Err(DdadError::Dataset(format!("{} appears in both train and test", leak.id)));
        }
        Ok(())
    }
}

/// Environment variable that overrides the configured data root.
pub const DATA_ROOT_ENV: &str = "DDAD_DATA_ROOT";

/// `$DDAD_DATA_ROOT` if set, otherwise `configured`.
pub fn resolve_data_root(configured: Option<&Path>) -> Option<PathBuf> {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
        _ => configured.map(Path::to_path_buf),
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| DdadError::Dataset(format!("{}: {e}", dir.display())))? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| DdadError::Dataset(format!("{}: {e}", dir.display())))? {
        let p = entry?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| DdadError::Dataset(format!("cannot read {}: {e}", path.display())))
}

fn fit(img: &DynamicImage, resolution: usize, crop: Option<usize>) -> DynamicImage {
    let r = resolution as u32;
    let img = if img.width() == r && img.height() == r {
        img.clone()
    } else {
        img.resize_exact(r, r, FilterType::Triangle)
    };
    match crop {
        Some(c) if c < resolution => {
            let off = ((resolution - c) / 2) as u32;
            img.crop_imm(off, off, c as u32, c as u32)
        }
        _ => img,
    }
}

/// 8-bit RGB (grayscale is replicated) to `[3, H, W]` in `[-1, 1]`.
pub fn tensor_from_rgb(img: &RgbImage) -> ImageTensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    ImageTensor::from_vec(3, h, w, data).expect("sized buffer")
}

/// Inverse of [`tensor_from_rgb`], clamping to the displayable range.
pub fn rgb_from_tensor(t: &ImageTensor) -> RgbImage {
    let [c, h, w] = t.shape();
    let a = t.array();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = a[[ch.min(c - 1), y as usize, x as usize]];
            ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Loads one image the way [`load_mvtec`] does.
pub fn load_image(path: &Path, resolution: usize, crop: Option<usize>) -> Result<ImageTensor> {
    Ok(tensor_from_rgb(&fit(&open(path)?, resolution, crop).to_rgb8()))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    image_files(dir)
}

fn load_mask(path: &Path, resolution: usize, crop: Option<usize>) -> Result<Array2<bool>> {
    let m = fit(&open(path)?, resolution, crop).to_luma32f();
    let (w, h) = (m.width() as usize, m.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| m.get_pixel(x as u32, y as u32)[0] >= 0.5))
}

/// Reads an MVTec-layout category:
/// `<root>/<category>/train/good`, `test/<type>` and
/// `ground_truth/<type>/<stem>_mask.png`. Images are resized bilinearly to
/// `resolution`, optionally center-cropped to `crop`, and scaled to `[-1, 1]`.
pub fn load_mvtec(root: &Path, category: &str, resolution: usize, crop: Option<usize>) -> Result<Dataset> {
    if resolution == 0 || crop.is_some_and(|c| c == 0 || c > resolution) {
        return Err(DdadError::InvalidConfig(format!("resolution {resolution} with crop {crop:?}")));
    }
    let base = root.join(category);
    let size = crop.unwrap_or(resolution);
    let mut items = Vec::new();
    let mut load = |path: &Path, split: Split, defect_type: String, mask: Array2<bool>| -> Result<()> {
        let image = load_image(path, resolution, crop)?;
        items.push(Item { id: path.display().to_string(), image, split, defect_type, mask });
        Ok(())
    };
    for p in image_files(&base.join("train").join("good"))? {
        load(&p, Split::TrainGood, "good".into(), Array2::from_elem((size, size), false))?;
    }
    for dir in subdirs(&base.join("test"))? {
        let kind = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        for p in image_files(&dir)? {
            if kind == "good" {
                load(&p, Split::TestGood, kind.clone(), Array2::from_elem((size, size), false))?;
                continue;
            }
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let mpath = base.join("ground_truth").join(&kind).join(format!("{stem}_mask.png"));
            if !mpath.is_file() {
                return Err(DdadError::Dataset(format!("missing mask {} for {}", mpath.display(), p.display())));
            }
            let mask = load_mask(&mpath, resolution, crop)?;
            load(&p, Split::TestDefect, kind.clone(), mask)?;
        }
    }
    let ds = Dataset { category: category.into(), resolution: size, items };
    ds.validate()?;
    Ok(ds)
}
