//! Tape-based reverse-mode autodiff over NCHW tensors.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Calling [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of a scalar loss with respect to every parameter that was read
//! through [`Graph::param`].

use std::borrow::Cow;

use super::ops;
use super::scalar::{matmul, MatRef};
use super::{ParamId, ParamStore, Scalar, Tensor};

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddChannel { x: Var, bias: Var },
    Scale(Var, T),
    Silu(Var),
    Relu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Concat(Var, Var),
    Upsample2x(Var),
    PixelUnshuffle(Var),
    PixelShuffle(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<T> },
    Mse(Var, Var),
    CosineDistance(Var, Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss never
/// touched.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Flattened gradient in parameter registration order; untouched
    /// parameters contribute zeros.
    pub fn flatten(&self, params: &ParamStore<T>) -> Vec<T> {
        params
            .iter()
            .flat_map(|(id, _, t)| match self.get(id) {
                Some(g) => g.data.clone(),
                None => vec![T::zero(); t.len()],
            })
            .collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data.iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    trainable: bool,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph whose parameter reads are differentiable.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, trainable: true, param_nodes: vec![None; params.len()], nodes: Vec::new() }
    }

    /// Graph for inference: nothing requires a gradient.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { trainable: false, ..Self::new(params) }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone().into_owned()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Param(id),
            requires_grad: self.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    /// `x [N, in] * w^T [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, fin) = self.value(x).dims2();
        let (fout, win) = self.value(w).dims2();
        assert_eq!(fin, win, "linear: input features {fin} vs weight {win}");
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bias = &self.value(b).data;
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        matmul(
            MatRef::new(&self.value(x).data, n, fin),
            MatRef::new(&self.value(w).data, fout, fin).t(),
            &mut out,
            b.is_some(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(vec![n, fout], out), Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a per-sample, per-channel bias `[N, C]` to `x [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        assert_eq!(self.value(bias).shape, vec![n, c], "add_channel: bias shape");
        let vb = &self.value(bias).data;
        let hw = h * w;
        let mut data = vx.data.clone();
        for (i, plane) in data.chunks_mut(hw).enumerate() {
            let b = vb[i];
            plane.iter_mut().for_each(|v| *v += b);
        }
        let out = Tensor::new(vx.shape.clone(), data);
        self.push(out, Op::AddChannel { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape.clone(), vx.data.iter().map(|&v| v * s).collect());
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data.iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(vx.shape.clone(), data);
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data.iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(vx.shape.clone(), data);
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels into {groups} groups");
        let group_len = (c / groups) * h * w;
        let cpg = c / groups;
        let eps = T::from_f64_lossy(GROUP_NORM_EPS);
        let m = T::from_usize(group_len).unwrap();
        let (g_data, b_data) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = vec![T::zero(); vx.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for (gi, (src, dst)) in vx.data.chunks(group_len).zip(out.chunks_mut(group_len)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / m;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let rstd = T::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let g0 = (gi % groups) * cpg;
            for (ci, (s, d)) in src.chunks(h * w).zip(dst.chunks_mut(h * w)).enumerate() {
                let (ga, be) = (g_data[g0 + ci], b_data[g0 + ci]);
                for (sv, dv) in s.iter().zip(d.iter_mut()) {
                    *dv = (*sv - mean) * rstd * ga + be;
                }
            }
        }
        let out = Tensor::new(vx.shape.clone(), out);
        self.push(
            out,
            Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds },
            &[x, gamma, beta],
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let out = ops::concat_channels(self.value(a), self.value(b));
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let out = ops::upsample2x(self.value(x));
        self.push(out, Op::Upsample2x(x), &[x])
    }

    /// Space-to-depth with factor 2: `[N,C,H,W] -> [N,4C,H/2,W/2]`.
    pub fn pixel_unshuffle(&mut self, x: Var) -> Var {
        let out = ops::pixel_unshuffle(self.value(x));
        self.push(out, Op::PixelUnshuffle(x), &[x])
    }

    pub fn pixel_shuffle(&mut self, x: Var) -> Var {
        let out = ops::pixel_shuffle(self.value(x));
        self.push(out, Op::PixelShuffle(x), &[x])
    }

    /// Single-head spatial self-attention; `q`, `k`, `v` are `[N, C, H, W]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (out, probs) = ops::attention_forward(self.value(q), self.value(k), self.value(v));
        self.push(out, Op::Attention { q, k, v, probs }, &[q, k, v])
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mse: shape mismatch");
        let m = T::from_usize(va.len()).unwrap();
        let s = va.data.iter().zip(&vb.data).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>() / m;
        self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    /// Mean over all `(n, h, w)` positions of `1 - cos` between the channel
    /// vectors of `a` and `b`. See [`ops::cosine`] for the zero-vector rule.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "cosine_distance: shape mismatch");
        let cos = ops::cosine_map(va, vb);
        let m = T::from_usize(cos.len()).unwrap();
        let s = cos.iter().map(|&c| T::one() - c).sum::<T>() / m;
        self.push(Tensor::scalar(s), Op::CosineDistance(a, b), &[a, b])
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let s = terms.iter().map(|&(v, w)| self.value(v).item() * w).sum::<T>();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(mut self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { grads: vec![None; self.params.len()] };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(idx, &op, &g, &mut grads, &mut out);
        }
        out
    }

    fn backward_op(
        &self,
        idx: usize,
        op: &Op<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        let node_value = &self.nodes[idx].value;
        match op {
            Op::Leaf => {}
            Op::Param(id) => {
                out.grads[id.0] = Some(Tensor::new(node_value.shape.clone(), g.to_vec()));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let dx = if self.rg(*x) { Some(grad_buf(grads, *x, vx.len())) } else { None };
                let mut dw = vec![T::zero(); vw.len()];
                let mut db = b.map(|_| vec![T::zero(); vw.shape[0]]);
                ops::conv2d_backward(vx, vw, g, *stride, *pad, dx, &mut dw, db.as_deref_mut());
                if self.rg(*w) {
                    add_into(grad_buf(grads, *w, vw.len()), &dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    if self.rg(*b) {
                        add_into(grad_buf(grads, *b, db.len()), &db);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (n, fin) = vx.dims2();
                let fout = vw.shape[0];
                if self.rg(*x) {
                    let dx = grad_buf(grads, *x, vx.len());
                    matmul(MatRef::new(g, n, fout), MatRef::new(&vw.data, fout, fin), dx, true);
                }
                if self.rg(*w) {
                    let dw = grad_buf(grads, *w, vw.len());
                    matmul(MatRef::new(g, n, fout).t(), MatRef::new(&vx.data, n, fin), dw, true);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = grad_buf(grads, *b, fout);
                        for row in g.chunks(fout) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(grad_buf(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddChannel { x, bias } => {
                if self.rg(*x) {
                    add_into(grad_buf(grads, *x, g.len()), g);
                }
                if self.rg(*bias) {
                    let (_, _, h, w) = node_value.dims4();
                    let nb = self.value(*bias).len();
                    let db = grad_buf(grads, *bias, nb);
                    for (i, plane) in g.chunks(h * w).enumerate() {
                        db[i] += plane.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.rg(*x) {
                    let dx = grad_buf(grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *s;
                    }
                }
            }
            Op::Silu(x) => {
                if self.rg(*x) {
                    let vx = self.value(*x);
                    let dx = grad_buf(grads, *x, g.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(&vx.data) {
                        let s = sigmoid(xv);
                        *d += gv * s * (T::one() + xv * (T::one() - s));
                    }
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let vx = self.value(*x);
                    let dx = grad_buf(grads, *x, g.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(&vx.data) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                self.group_norm_backward(*x, *gamma, *beta, *groups, mean, rstd, g, grads);
            }
            Op::Concat(a, b) => {
                let (ga, gb) = ops::split_channels(g, self.value(*a), self.value(*b));
                if self.rg(*a) {
                    add_into(grad_buf(grads, *a, ga.len()), &ga);
                }
                if self.rg(*b) {
                    add_into(grad_buf(grads, *b, gb.len()), &gb);
                }
            }
            Op::Upsample2x(x) => {
                if self.rg(*x) {
                    let vx = self.value(*x);
                    let dx = grad_buf(grads, *x, vx.len());
                    ops::upsample2x_backward(g, vx, dx);
                }
            }
            Op::PixelUnshuffle(x) => {
                if self.rg(*x) {
                    let vx = self.value(*x);
                    let back = ops::pixel_shuffle(&Tensor::new(node_value.shape.clone(), g.to_vec()));
                    add_into(grad_buf(grads, *x, vx.len()), &back.data);
                }
            }
            Op::PixelShuffle(x) => {
                if self.rg(*x) {
                    let vx = self.value(*x);
                    let back = ops::pixel_unshuffle(&Tensor::new(node_value.shape.clone(), g.to_vec()));
                    add_into(grad_buf(grads, *x, vx.len()), &back.data);
                }
            }
            Op::Attention { q, k, v, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = ops::attention_backward(vq, vk, vv, probs, g);
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if self.rg(*var) {
                        add_into(grad_buf(grads, *var, d.len()), &d);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = g[0] * T::from_f64_lossy(2.0) / T::from_usize(va.len()).unwrap();
                if self.rg(*a) {
                    let da = grad_buf(grads, *a, va.len());
                    for ((d, &p), &q) in da.iter_mut().zip(&va.data).zip(&vb.data) {
                        *d += (p - q) * scale;
                    }
                }
                if self.rg(*b) {
                    let db = grad_buf(grads, *b, vb.len());
                    for ((d, &p), &q) in db.iter_mut().zip(&va.data).zip(&vb.data) {
                        *d -= (p - q) * scale;
                    }
                }
            }
            Op::CosineDistance(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ga, gb) = ops::cosine_distance_backward(va, vb, g[0]);
                if self.rg(*a) {
                    add_into(grad_buf(grads, *a, ga.len()), &ga);
                }
                if self.rg(*b) {
                    add_into(grad_buf(grads, *b, gb.len()), &gb);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.rg(v) {
                        grad_buf(grads, v, 1)[0] += g[0] * w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[T],
        rstd: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let vx = self.value(x);
        let (_, c, h, w) = vx.dims4();
        let hw = h * w;
        let cpg = c / groups;
        let group_len = cpg * hw;
        let m = T::from_usize(group_len).unwrap();
        let gam = &self.value(gamma).data;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx_all = if self.rg(x) { Some(vec![T::zero(); vx.len()]) } else { None };

        for gi in 0..vx.len() / group_len {
            let (mu, rs) = (mean[gi], rstd[gi]);
            let c0 = (gi % groups) * cpg;
            let base = gi * group_len;
            let mut sum1 = T::zero();
            let mut sum2 = T::zero();
            for ci in 0..cpg {
                let ch = c0 + ci;
                let mut sg = T::zero();
                let mut sgx = T::zero();
                for p in 0..hw {
                    let i = base + ci * hw + p;
                    let xhat = (vx.data[i] - mu) * rs;
                    sg += g[i];
                    sgx += g[i] * xhat;
                }
                dgamma[ch] += sgx;
                dbeta[ch] += sg;
                sum1 += sg * gam[ch];
                sum2 += sgx * gam[ch];
            }
            if let Some(dx) = dx_all.as_mut() {
                for ci in 0..cpg {
                    let ga = gam[c0 + ci];
                    for p in 0..hw {
                        let i = base + ci * hw + p;
                        let xhat = (vx.data[i] - mu) * rs;
                        dx[i] = rs * (g[i] * ga - sum1 / m - xhat * sum2 / m);
                    }
                }
            }
        }
        if let Some(dx) = dx_all {
            add_into(grad_buf(grads, x, dx.len()), &dx);
        }
        if self.rg(gamma) {
            add_into(grad_buf(grads, gamma, c), &dgamma);
        }
        if self.rg(beta) {
            add_into(grad_buf(grads, beta, c), &dbeta);
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
