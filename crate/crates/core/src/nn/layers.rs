use rand::Rng;

use super::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weight and bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), vec![cout, cin, kernel, kernel], bound, rng);
        let bias = Some(store.add_uniform(format!("{name}.bias"), vec![cout], bound, rng));
        Self { weight, bias, stride, pad }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, 3, 1, 1)
    }

    pub fn pointwise<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, 1, 1, 0)
    }

    /// Same layout, all parameters zero. Used for residual output layers so
    /// that a fresh block starts as the identity.
    pub fn zeroed<T: Scalar>(self, store: &mut ParamStore<T>) -> Self {
        for id in std::iter::once(self.weight).chain(self.bias) {
            store.get_mut(id).data.iter_mut().for_each(|v| *v = T::zero());
        }
        self
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), vec![fout, fin], bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), vec![fout], bound, rng);
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{name}: {channels} channels not divisible into {groups} groups");
        let gamma = store.add_constant(format!("{name}.gamma"), vec![channels], 1.0);
        let beta = store.add_constant(format!("{name}.beta"), vec![channels], 0.0);
        Self { gamma, beta, groups }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}
