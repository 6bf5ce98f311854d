//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use ddad_core::denoiser::Denoiser;
use ddad_core::schedule::VarianceSchedule;
use ddad_core::ImageTensor;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Unconditioned DDIM written from the update equations alone: no noise
/// adjustment, no target, sigma = 0.
pub fn plain_ddim(m: &dyn Denoiser, x_start: &ImageTensor, t_prime: usize, n: usize, s: &VarianceSchedule) -> ImageTensor {
    let sq = |t: usize| -> (f32, f32) {
        let ab = if t == 0 { 1.0 } else { s.alpha_bars()[t - 1] };
        (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32)
    };
    let ts: Vec<usize> = (0..n).map(|i| t_prime - i * t_prime / n).collect();
    let mut x: Vec<f32> = x_start.as_slice().to_vec();
    let [c, h, w] = x_start.shape();
    for (i, &t) in ts.iter().enumerate() {
        let t_next = if i + 1 < n { ts[i + 1] } else { 0 };
        let xt = ImageTensor::from_vec(c, h, w, x.clone()).unwrap();
        let eps = m.predict_noise(&xt, t).unwrap();
        let (a, b) = sq(t);
        let (an, bn) = sq(t_next);
        x = x
            .iter()
            .zip(eps.as_slice())
            .map(|(&xv, &e)| {
                let x0 = (xv - b * e) / a;
                an * x0 + bn * e
            })
            .collect();
    }
    ImageTensor::from_vec(c, h, w, x).unwrap()
}

pub fn pairwise_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Labels by repeated flood fill from every unvisited foreground pixel.
pub fn flood_fill_labels(mask: &Array2<bool>) -> Array2<usize> {
    let (h, w) = mask.dim();
    let mut lab = Array2::zeros((h, w));
    let mut next = 0;
    for y in 0..h {
        for x in 0..w {
            if !mask[(y, x)] || lab[(y, x)] != 0 {
                continue;
            }
            next += 1;
            let mut stack = vec![(y, x)];
            while let Some((cy, cx)) = stack.pop() {
                if !mask[(cy, cx)] || lab[(cy, cx)] != 0 {
                    continue;
                }
                lab[(cy, cx)] = next;
                if cy > 0 {
                    stack.push((cy - 1, cx));
                }
                if cy + 1 < h {
                    stack.push((cy + 1, cx));
                }
                if cx > 0 {
                    stack.push((cy, cx - 1));
                }
                if cx + 1 < w {
                    stack.push((cy, cx + 1));
                }
            }
        }
    }
    lab
}

/// Every distinct score is a threshold; overlaps and FPR are counted
/// directly; the curve starts at the origin and is integrated with the
/// trapezoid rule, interpolating at the limit.
pub fn pro_oracle(maps: &[Array2<f64>], masks: &[Array2<bool>], limit: f64) -> f64 {
    let labels: Vec<Array2<usize>> = masks.iter().map(flood_fill_labels).collect();
    let mut th: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &t in &th {
        let (mut fp, mut normal) = (0usize, 0usize);
        let mut overlaps = Vec::new();
        for (m, l) in maps.iter().zip(&labels) {
            let ncomp = l.iter().copied().max().unwrap_or(0);
            for c in 1..=ncomp {
                let (mut hit, mut size) = (0, 0);
                for (&v, &lab) in m.iter().zip(l) {
                    if lab == c {
                        size += 1;
                        if v >= t {
                            hit += 1;
                        }
                    }
                }
                overlaps.push(hit as f64 / size as f64);
            }
            for (&v, &lab) in m.iter().zip(l) {
                if lab == 0 {
                    normal += 1;
                    if v >= t {
                        fp += 1;
                    }
                }
            }
        }
        pts.push((fp as f64 / normal as f64, overlaps.iter().sum::<f64>() / overlaps.len() as f64));
    }
    let mut area = 0.0;
    for k in 1..pts.len() {
        let ((x0, y0), (x1, y1)) = (pts[k - 1], pts[k]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Array2<f64>>, Vec<Array2<bool>>) {
    loop {
        let n = rng.random_range(1..4);
        let h = rng.random_range(3..9);
        let w = rng.random_range(3..9);
        let levels = rng.random_range(3..40);
        let masks: Vec<Array2<bool>> = (0..n).map(|_| Array2::from_shape_fn((h, w), |_| rng.random_bool(0.25))).collect();
        let maps: Vec<Array2<f64>> = masks
            .iter()
            .map(|m| m.mapv(|a| (rng.random_range(0..levels) + if a { levels / 3 } else { 0 }) as f64))
            .collect();
        let any_pos = masks.iter().any(|m| m.iter().any(|&b| b));
        let any_neg = masks.iter().any(|m| m.iter().any(|&b| !b));
        if any_pos && any_neg {
            return (maps, masks);
        }
    }
}
