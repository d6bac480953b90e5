//! Parameter storage, the handful of layers the models are built from, and optimizers.

use rand::Rng;

use crate::autograd::{Grads, Graph, Var};
use crate::tensor::{Elem, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::cast_from(rng.random_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Places every parameter on the tape, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// A [`ParamStore`] placed on a particular [`Graph`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters the loss does not touch get zeros.
    pub fn grads<T: Elem>(&self, g: &Graph<T>, grads: &mut Grads<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect()
    }
}

/// `y = x · W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_dim], bound, rng));
        Self { w, b, in_dim, out_dim }
    }

    /// Zero-initialised output layer.
    pub fn zeros<T: Elem>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let b = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward<T: Elem>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.in_dim, "linear input width");
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.in_dim]) };
        let mut y = g.matmul(flat, p.var(self.w));
        if let Some(b) = self.b {
            y = g.add(y, p.var(b));
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            g.reshape(y, &out)
        }
    }
}

/// Square-kernel 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let w = store.add_uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound, rng);
        let b = store.add_uniform(format!("{name}.bias"), &[out_ch], bound, rng);
        Self { w, b, stride, pad }
    }

    /// 3×3, padding 1.
    pub fn same<T: Elem>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self::new(store, rng, name, in_ch, out_ch, 3, 1, 1)
    }

    pub fn forward<T: Elem>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Elem> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.entries().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::cast_from(self.beta1), T::cast_from(self.beta2));
        let lr = T::cast_from(self.lr);
        let decay = T::cast_from(1.0 - self.lr * self.weight_decay);
        let (bc1, bc2, eps) = (T::cast_from(bc1), T::cast_from(bc2), T::cast_from(self.eps));
        for (((p, g), m), v) in store.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// SGD with momentum and coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Elem> Sgd<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: store.entries().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        let (lr, mu, wd) = (
            T::cast_from(self.lr),
            T::cast_from(self.momentum),
            T::cast_from(self.weight_decay),
        );
        for ((p, g), vel) in store.tensors_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                let d = gv + wd * *pv;
                *vv = mu * *vv + d;
                *pv = *pv - lr * *vv;
            }
        }
    }
}

/// Exponential moving average of a parameter store, with the usual
/// `(1 + n)/(10 + n)` warm-up so early averages are not dominated by the init.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    pub decay: f64,
    updates: u64,
    shadow: ParamStore<T>,
}

impl<T: Elem> Ema<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        Self {
            decay,
            updates: 0,
            shadow: store.clone(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        self.updates += 1;
        let n = self.updates as f64;
        let d = T::cast_from(self.decay.min((1.0 + n) / (10.0 + n)));
        for (s, (_, p)) in self.shadow.tensors_mut().zip(store.entries()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (T::one() - d) * pv;
            }
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.shadow
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.shadow
    }
}
