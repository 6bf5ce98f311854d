//! Inferno colour scale for heatmap images.

use image::{Rgb, RgbImage};
use ndarray::Array2;

/// Inferno sampled at nine evenly spaced points.
const INFERNO: [[f64; 3]; 9] = [
    [0.0, 0.0, 4.0],
    [31.0, 12.0, 72.0],
    [85.0, 15.0, 109.0],
    [136.0, 34.0, 106.0],
    [186.0, 54.0, 85.0],
    [227.0, 89.0, 51.0],
    [249.0, 140.0, 10.0],
    [249.0, 201.0, 50.0],
    [252.0, 255.0, 164.0],
];

/// Colour for `t` in `[0, 1]` (clamped), linearly interpolated.
pub fn inferno(t: f64) -> [u8; 3] {
    let x = t.clamp(0.0, 1.0) * (INFERNO.len() - 1) as f64;
    let i = (x as usize).min(INFERNO.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (INFERNO[i][k] * (1.0 - f) + INFERNO[i + 1][k] * f).round() as u8;
    [c(0), c(1), c(2)]
}

/// Maps `[0, max]` onto the scale; a non-positive `max` gives the bottom colour.
pub fn colorize(map: &Array2<f64>, max: f64) -> RgbImage {
    let (h, w) = map.dim();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(inferno(map[[y as usize, x as usize]] * scale)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_ends_and_midpoints() {
        assert_eq!(inferno(0.0), [0, 0, 4]);
        assert_eq!(inferno(1.0), [252, 255, 164]);
        assert_eq!(inferno(7.0), inferno(1.0));
        assert_eq!(inferno(0.0625), [16, 6, 38]);
        let m = Array2::from_shape_vec((1, 2), vec![0.0, 2.0]).unwrap();
        let img = colorize(&m, 2.0);
        assert_eq!(img.get_pixel(1, 0).0, [252, 255, 164]);
        assert!(colorize(&m, 0.0).pixels().all(|p| p.0 == [0, 0, 4]));
    }
}
