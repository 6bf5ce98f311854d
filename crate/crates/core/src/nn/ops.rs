//! Forward and backward kernels used by [`super::Graph`].

use super::scalar::{matmul, MatRef};
use super::{Scalar, Tensor};

pub(crate) fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel {k} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let l = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * l..][..l];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // valid ox satisfy 0 <= ox + kx - pad < w
                        let lo = pad.saturating_sub(kx).min(wo);
                        let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = lo + kx - pad;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let l = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = x.dims4();
    let (cout, cin, k, k2) = w.dims4();
    assert_eq!(c, cin, "conv2d: input has {c} channels, weight expects {cin}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    let (ho, wo) = (conv_out_dim(h, k, stride, pad), conv_out_dim(wd, k, stride, pad));
    let (kk, l) = (cin * k * k, ho * wo);
    let mut out = vec![T::zero(); n * cout * l];
    let mut cols = if is_pointwise(k, stride, pad) { Vec::new() } else { vec![T::zero(); kk * l] };
    for i in 0..n {
        let xs = x.sample(i);
        let o = &mut out[i * cout * l..(i + 1) * cout * l];
        if let Some(b) = b {
            for (row, &bv) in o.chunks_mut(l).zip(&b.data) {
                row.fill(bv);
            }
        }
        let colref = if cols.is_empty() {
            xs
        } else {
            im2col(xs, c, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        matmul(MatRef::new(&w.data, cout, kk), MatRef::new(colref, kk, l), o, b.is_some());
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    stride: usize,
    pad: usize,
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    mut db: Option<&mut [T]>,
) {
    let (n, c, h, wd) = x.dims4();
    let (cout, cin, k, _) = w.dims4();
    let (ho, wo) = (conv_out_dim(h, k, stride, pad), conv_out_dim(wd, k, stride, pad));
    let (kk, l) = (cin * k * k, ho * wo);
    let pointwise = is_pointwise(k, stride, pad);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * l] };
    let mut dcols = vec![T::zero(); kk * l];
    for i in 0..n {
        let xs = x.sample(i);
        let gs = &g[i * cout * l..(i + 1) * cout * l];
        let colref = if pointwise {
            xs
        } else {
            im2col(xs, c, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        matmul(MatRef::new(gs, cout, l), MatRef::new(colref, kk, l).t(), dw, true);
        if let Some(db) = db.as_deref_mut() {
            for (d, row) in db.iter_mut().zip(gs.chunks(l)) {
                *d += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
            if pointwise {
                matmul(MatRef::new(&w.data, cout, kk).t(), MatRef::new(gs, cout, l), dxs, true);
            } else {
                matmul(MatRef::new(&w.data, cout, kk).t(), MatRef::new(gs, cout, l), &mut dcols, false);
                col2im(&dcols, c, h, wd, k, stride, pad, ho, wo, dxs);
            }
        }
    }
}

pub(crate) fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat: batch/spatial mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

pub(crate) fn split_channels<T: Scalar>(g: &[T], a: &Tensor<T>, b: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let n = a.shape[0];
    let (sa, sb) = (a.len() / n, b.len() / n);
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    for chunk in g.chunks(sa + sb) {
        ga.extend_from_slice(&chunk[..sa]);
        gb.extend_from_slice(&chunk[sa..]);
    }
    (ga, gb)
}

pub(crate) fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for (src, dst) in x.data.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, 2 * h, 2 * w], out)
}

pub(crate) fn upsample2x_backward<T: Scalar>(g: &[T], x: &Tensor<T>, dx: &mut [T]) {
    let (_, _, h, w) = x.dims4();
    for (src, dst) in g.chunks(4 * h * w).zip(dx.chunks_mut(h * w)) {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
}

pub(crate) fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "pixel_unshuffle needs even spatial dims");
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * 4 + (y % 2) * 2 + xx % 2;
                    out[((i * 4 * c + oc) * h2 + y / 2) * w2 + xx / 2] =
                        x.data[((i * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    Tensor::new(vec![n, 4 * c, h2, w2], out)
}

pub(crate) fn pixel_shuffle<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c4, h2, w2) = x.dims4();
    assert!(c4 % 4 == 0, "pixel_shuffle needs a multiple of 4 channels");
    let (c, h, w) = (c4 / 4, h2 * 2, w2 * 2);
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * 4 + (y % 2) * 2 + xx % 2;
                    out[((i * c + ci) * h + y) * w + xx] =
                        x.data[((i * c4 + oc) * h2 + y / 2) * w2 + xx / 2];
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Returns the attention output and the row-softmax probabilities
/// `[N, L, L]` kept for the backward pass.
pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = q.dims4();
    assert_eq!(q.shape, k.shape);
    assert_eq!(q.shape, v.shape);
    let l = h * w;
    let scale = T::one() / T::from_usize(c).unwrap().sqrt();
    let mut probs = vec![T::zero(); n * l * l];
    let mut out = vec![T::zero(); q.len()];
    for i in 0..n {
        let p = &mut probs[i * l * l..(i + 1) * l * l];
        // S = Q^T K, with Q, K stored as C x L
        matmul(MatRef::new(q.sample(i), c, l).t(), MatRef::new(k.sample(i), c, l), p, false);
        for row in p.chunks_mut(l) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
            let mut z = T::zero();
            for s in row.iter_mut() {
                *s = (*s * scale - mx).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
        }
        // O = V P^T
        matmul(
            MatRef::new(v.sample(i), c, l),
            MatRef::new(p, l, l).t(),
            &mut out[i * c * l..(i + 1) * c * l],
            false,
        );
    }
    (Tensor::new(q.shape.clone(), out), probs)
}

pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = q.dims4();
    let l = h * w;
    let scale = T::one() / T::from_usize(c).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); q.len()];
    let mut dv = vec![T::zero(); q.len()];
    let mut ds = vec![T::zero(); l * l];
    for i in 0..n {
        let p = &probs[i * l * l..(i + 1) * l * l];
        let go = &g[i * c * l..(i + 1) * c * l];
        let span = i * c * l..(i + 1) * c * l;
        matmul(MatRef::new(go, c, l), MatRef::new(p, l, l), &mut dv[span.clone()], false);
        // dP = dO^T V
        matmul(MatRef::new(go, c, l).t(), MatRef::new(v.sample(i), c, l), &mut ds, false);
        for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
            let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
            for (d, &pv) in drow.iter_mut().zip(prow) {
                *d = pv * (*d - dot) * scale;
            }
        }
        matmul(MatRef::new(k.sample(i), c, l), MatRef::new(&ds, l, l).t(), &mut dq[span.clone()], false);
        matmul(MatRef::new(q.sample(i), c, l), MatRef::new(&ds, l, l), &mut dk[span], false);
    }
    (dq, dk, dv)
}

/// Cosine similarity of two channel vectors. Two zero vectors are treated as
/// identical (cosine 1); one zero vector against a non-zero one gives 0.
pub fn cosine<T: Scalar>(dot: T, na2: T, nb2: T) -> T {
    let z = T::zero();
    match (na2 == z, nb2 == z) {
        (true, true) => T::one(),
        (true, false) | (false, true) => z,
        _ => dot / (na2.sqrt() * nb2.sqrt()),
    }
}

/// Per-position cosine between channel vectors of two `[N, C, H, W]`
/// tensors; result is `[N * H * W]` in `(n, h, w)` order.
pub fn cosine_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (n, c, h, w) = a.dims4();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        let (sa, sb) = (a.sample(i), b.sample(i));
        let mut dot = vec![T::zero(); hw];
        let mut na = vec![T::zero(); hw];
        let mut nb = vec![T::zero(); hw];
        for ci in 0..c {
            let (pa, pb) = (&sa[ci * hw..(ci + 1) * hw], &sb[ci * hw..(ci + 1) * hw]);
            for p in 0..hw {
                dot[p] += pa[p] * pb[p];
                na[p] += pa[p] * pa[p];
                nb[p] += pb[p] * pb[p];
            }
        }
        out.extend((0..hw).map(|p| cosine(dot[p], na[p], nb[p])));
    }
    out
}

pub(crate) fn cosine_distance_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: T,
) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = a.dims4();
    let hw = h * w;
    let m = T::from_usize(n * hw).unwrap();
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for i in 0..n {
        let (sa, sb) = (a.sample(i), b.sample(i));
        let base = i * c * hw;
        for p in 0..hw {
            let (mut dot, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
            for ci in 0..c {
                let (x, y) = (sa[ci * hw + p], sb[ci * hw + p]);
                dot += x * y;
                na2 += x * x;
                nb2 += y * y;
            }
            if na2 == T::zero() || nb2 == T::zero() {
                continue;
            }
            let (na, nb) = (na2.sqrt(), nb2.sqrt());
            let cos = dot / (na * nb);
            let k = -g / m;
            for ci in 0..c {
                let (x, y) = (sa[ci * hw + p], sb[ci * hw + p]);
                ga[base + ci * hw + p] += k * (y / (na * nb) - cos * x / na2);
                gb[base + ci * hw + p] += k * (x / (na * nb) - cos * y / nb2);
            }
        }
    }
    (ga, gb)
}
