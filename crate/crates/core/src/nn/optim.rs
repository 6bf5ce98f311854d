use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with L2 weight decay folded into the gradient.
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
    /// Plain gradient descent (weight decay folded into the gradient).
    Sgd,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self { kind, lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr, weight_decay)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::AdamW, lr, weight_decay)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0.0)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// (no decay either).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let lr = T::from_f64_lossy(self.lr);
        let wd = T::from_f64_lossy(self.weight_decay);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let eps = T::from_f64_lossy(self.eps);
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for i in 0..p.data.len() {
                let theta = p.data[i];
                let mut gi = g.data[i];
                match self.kind {
                    OptimizerKind::Sgd => {
                        gi += wd * theta;
                        p.data[i] = theta - lr * gi;
                        continue;
                    }
                    OptimizerKind::Adam => gi += wd * theta,
                    OptimizerKind::AdamW => p.data[i] = theta * (T::one() - lr * wd),
                }
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(vec![1, 3], vec![3.0, -2.0, 0.5]));
        let target = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]);
        let mut opt = Optimizer::adam(0.05, 0.0);
        for _ in 0..2000 {
            let mut g = Graph::new(&store);
            let x = g.param(id);
            let t = g.input(target.clone());
            let loss = g.mse(x, t);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads);
        }
        for v in &store.get(id).data {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        // zero gradient: Adam(L2) moves through the moment estimates, AdamW
        // only shrinks by lr * wd.
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(vec![1], vec![2.0]));
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.param(id);
            let s = g.mse(x, x);
            g.backward(s)
        };
        let mut opt = Optimizer::adamw(0.1, 0.5);
        opt.step(&mut store, &grads);
        assert!((store.get(id).data[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
