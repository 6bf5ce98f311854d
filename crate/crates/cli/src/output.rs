//! Heatmap and reconstruction files.
//!
//! Raw arrays are little-endian `f32`, row-major, with no header; the shape
//! lives in the JSON sidecar (heatmaps) or the detection index.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ddad_core::colormap::colorize;
use ddad_core::dataset::rgb_from_tensor;
use ddad_core::ImageTensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub id: String,
    pub image_score: f64,
    pub config_hash: String,
    pub provenance: String,
    pub height: usize,
    pub width: usize,
    /// Heatmap value mapped to the top of the PNG colour scale.
    pub png_max: f64,
}

pub fn write_raw(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_raw(path: &Path, len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() != 4 * len {
        bail!("{}: expected {} floats, found {} bytes", path.display(), len, bytes.len());
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn read_heatmap(raw: &Path, height: usize, width: usize) -> Result<Array2<f64>> {
    let v = read_raw(raw, height * width)?;
    Ok(Array2::from_shape_vec((height, width), v.into_iter().map(f64::from).collect())?)
}

/// Writes `<stem>.f32`, `<stem>.png` and `<stem>.json`.
pub fn write_heatmap(dir: &Path, stem: &str, map: &Array2<f64>, sidecar: &HeatmapSidecar) -> Result<()> {
    write_raw(&dir.join(format!("{stem}.f32")), map.iter().map(|&v| v as f32))?;
    colorize(map, sidecar.png_max).save(dir.join(format!("{stem}.png")))?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

/// Writes `<stem>.png` (values mapped from `[-1, 1]`) and the raw `[C, H, W]`
/// array as `<stem>.f32`.
pub fn write_reconstruction(dir: &Path, stem: &str, img: &ImageTensor) -> Result<()> {
    write_raw(&dir.join(format!("{stem}.f32")), img.as_slice().iter().copied())?;
    rgb_from_tensor(img).save(dir.join(format!("{stem}.png")))?;
    Ok(())
}

/// File-system safe name for item `index`: the index plus the last two
/// components of its id.
pub fn stem_for(index: usize, id: &str) -> String {
    let parts: Vec<&str> = id.split(['/', '\\']).filter(|p| !p.is_empty()).collect();
    let tail = parts[parts.len().saturating_sub(2)..].join("_");
    let tail = tail.rsplit_once('.').map_or(tail.as_str(), |(a, _)| a).to_string();
    let clean: String = tail.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{index:04}_{clean}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_unique_and_safe() {
        assert_eq!(stem_for(3, "test/patch/0007"), "0003_patch_0007");
        assert_eq!(stem_for(12, "/data/bottle/test/broken large/000.png"), "0012_broken_large_000");
        assert_eq!(stem_for(0, "x"), "0000_x");
    }

    #[test]
    fn raw_roundtrip_and_length_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        write_raw(&p, [1.5f32, -2.0, 0.25].into_iter()).unwrap();
        assert_eq!(read_raw(&p, 3).unwrap(), vec![1.5, -2.0, 0.25]);
        assert!(read_raw(&p, 4).is_err());
    }
}
