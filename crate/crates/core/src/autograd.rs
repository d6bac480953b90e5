//! A tape-based reverse-mode autodiff over [`Tensor`].
//!
//! Every operation appends a node to a [`Graph`]; [`Graph::backward`] walks the
//! tape in reverse. Shape errors inside the graph are programmer errors and
//! panic; public model entry points validate their inputs before reaching here.

use crate::tensor::{self, broadcast_zip, reduce_to, Elem, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One interpolation tap pair along an axis.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        rstd: Vec<T>,
    },
    Silu(Var),
    Relu(Var),
    Square(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Upsample2x(Var),
    Resize {
        x: Var,
        rows: Vec<Tap<T>>,
        cols: Vec<Tap<T>>,
    },
    ClampSt(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaf nodes only.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is retained by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::cast_from(c);
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::cast_from(c);
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `op(a) · op(b)` for 2-D operands or batched 3-D operands; `ta`/`tb`
    /// transpose the trailing two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = matmul_raw(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// NCHW convolution with square kernel `w` of shape `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// Group normalization without affine parameters; axis 1 holds channels.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        assert!(shape.len() >= 2, "group_norm needs [N, C, ...]");
        let (n, c) = (shape[0], shape[1]);
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let group_len = xv.numel() / (n * groups);
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(n * groups);
        let eps = T::cast_from(eps);
        for chunk in out.data_mut().chunks_mut(group_len) {
            let len = T::cast_from(group_len as f64);
            let mean = chunk.iter().copied().sum::<T>() / len;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
            let r = T::one() / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::GroupNorm { x, groups, rstd }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let last = *xv.shape().last().expect("softmax of a scalar");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(last) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let last = *xv.shape().last().expect("log_softmax of a scalar");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(last) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::cast_from(xv.numel() as f64));
        self.push(out, Op::MeanAll(x), &[x])
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let last = *shape.last().expect("sum_last of a scalar");
        let data = xv.data().chunks(last).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), data);
        self.push(out, Op::SumLast(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = tensor::permute(self.value(x), perm);
        self.push(out, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = concat_raw(&values, axis);
        self.push(out, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Nearest-neighbour 2× upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut data = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], data);
        self.push(out, Op::Upsample2x(x), &[x])
    }

    /// Bilinear resize of an NCHW tensor (half-pixel centers, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let s = self.shape(x).to_vec();
        if s[2] == out_h && s[3] == out_w {
            return x;
        }
        let rows = taps::<T>(s[2], out_h);
        let cols = taps::<T>(s[3], out_w);
        let out = resize_forward(self.value(x), &rows, &cols);
        self.push(out, Op::Resize { x, rows, cols }, &[x])
    }

    /// Clamps to `[lo, hi]` in the forward pass; the backward pass is the identity.
    pub fn clamp_straight_through(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::cast_from(lo), T::cast_from(hi));
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::ClampSt(x), &[x])
    }

    /// Scales every row of the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let last = *xv.shape().last().expect("l2_normalize of a scalar");
        let mut out = xv.clone();
        let tiny = T::cast_from(1e-12);
        let mut norms = Vec::with_capacity(xv.numel() / last.max(1));
        for row in out.data_mut().chunks_mut(last) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Reverse pass from `loss`, seeded with ones.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to(&g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, reduce_to(&g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to(&g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let neg = g.map(|v| -v);
                    self.accumulate(grads, *b, reduce_to(&neg, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = broadcast_zip(&g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(&ga, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let gb = broadcast_zip(&g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(&gb, self.shape(*b)));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) | Op::ClampSt(a) => self.accumulate(grads, *a, g),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = if *ta {
                        matmul_raw(bv, *tb, &g, true)
                    } else {
                        matmul_raw(&g, false, bv, !*tb)
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = if *tb {
                        matmul_raw(&g, true, av, *ta)
                    } else {
                        matmul_raw(av, !*ta, &g, false)
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (gx, gw, gb) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *stride,
                    *pad,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.map(|b| self.requires_grad(b)).unwrap_or(false),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::GroupNorm { x, groups, rstd } => {
                let y = &node.value;
                let n = y.shape()[0];
                let group_len = y.numel() / (n * groups);
                let len = T::cast_from(group_len as f64);
                let mut gx = g;
                for ((gc, yc), &r) in gx
                    .data_mut()
                    .chunks_mut(group_len)
                    .zip(y.data().chunks(group_len))
                    .zip(rstd)
                {
                    let mean_g = gc.iter().copied().sum::<T>() / len;
                    let mean_gy = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / len;
                    for (v, &yv) in gc.iter_mut().zip(yc) {
                        *v = r * (*v - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = T::cast_from(2.0);
                let gx = g.zip_map(self.value(*x), |gv, xv| two * xv * gv);
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let last = *y.shape().last().unwrap();
                let mut gx = g;
                for (gr, yr) in gx.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for (v, &yv) in gr.iter_mut().zip(yr) {
                        *v = yv * (*v - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let last = *y.shape().last().unwrap();
                let mut gx = g;
                for (gr, yr) in gx.data_mut().chunks_mut(last).zip(y.data().chunks(last)) {
                    let sum = gr.iter().copied().sum::<T>();
                    for (v, &yv) in gr.iter_mut().zip(yr) {
                        *v = *v - yv.exp() * sum;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gx = Tensor::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let n = T::cast_from(self.value(*x).numel() as f64);
                let gx = Tensor::full(self.shape(*x), g.item() / n);
                self.accumulate(grads, *x, gx);
            }
            Op::SumLast(x) => {
                let shape = self.shape(*x);
                let last = *shape.last().unwrap();
                let mut data = Vec::with_capacity(g.numel() * last);
                for &v in g.data() {
                    data.extend(std::iter::repeat_n(v, last));
                }
                self.accumulate(grads, *x, Tensor::new(shape.to_vec(), data));
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(*x));
                self.accumulate(grads, *x, gx);
            }
            Op::Permute(x, perm) => {
                let gx = tensor::permute(&g, &tensor::inverse_permutation(perm));
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let shape = g.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let xs_shape = self.shape(x).to_vec();
                    let len = xs_shape[*axis];
                    if self.requires_grad(x) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        self.accumulate(grads, x, Tensor::new(xs_shape, data));
                    }
                    offset += len;
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut data = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut data[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] = dst[(y / 2) * w + xx / 2] + src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, data));
            }
            Op::Resize { x, rows, cols } => {
                let gx = resize_backward(&g, self.shape(*x), rows, cols);
                self.accumulate(grads, *x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let last = *y.shape().last().unwrap();
                let mut gx = g;
                for ((gr, yr), &n) in gx
                    .data_mut()
                    .chunks_mut(last)
                    .zip(y.data().chunks(last))
                    .zip(norms)
                {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for (v, &yv) in gr.iter_mut().zip(yr) {
                        *v = (*v - yv * dot) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn sigmoid<T: Elem>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Matrix product with optional transposition of each operand's trailing two axes.
pub(crate) fn matmul_raw<T: Elem>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert!(
        (sa.len() == 2 && sb.len() == 2) || (sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0]),
        "matmul needs two 2-D or two equally batched 3-D operands, got {sa:?} and {sb:?}"
    );
    let batched = sa.len() == 3;
    let batch = if batched { sa[0] } else { 1 };
    let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {sa:?} (t={ta}) x {sb:?} (t={tb})");
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * ar * ac..(i + 1) * ar * ac],
            rsa,
            csa,
            &b.data()[i * br * bc..(i + 1) * br * bc],
            rsb,
            csb,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
    let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
    Tensor::new(shape, out)
}

fn concat_raw<T: Elem>(values: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    assert!(!values.is_empty(), "concat of nothing");
    let base = values[0].shape();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut total = 0;
    for v in values {
        let s = v.shape();
        assert!(
            s.len() == base.len()
                && s[..axis] == base[..axis]
                && s[axis + 1..] == base[axis + 1..],
            "concat shape mismatch {:?} vs {base:?} on axis {axis}",
            s
        );
        total += s[axis];
    }
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in values {
            let len = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = base.to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel {k} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - k) / stride + 1
}

/// Lays the receptive fields of a whole batch out as a `[C·k·k, N·P]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Elem>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    let cols_n = n * p;
    let mut cols = vec![T::zero(); c * k * k * cols_n];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for ni in 0..n {
                    let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    let dst = &mut cols[row * cols_n + ni * p..row * cols_n + (ni + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Elem>(
    cols: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    let cols_n = n * p;
    let mut x = vec![T::zero(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for ni in 0..n {
                    let src = &cols[row * cols_n + ni * p..row * cols_n + (ni + 1) * p];
                    let dst = &mut x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                let d = iy as usize * w + ix as usize;
                                dst[d] = dst[d] + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv2d_forward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (xs, ws) = (x.shape(), w.shape());
    assert!(xs.len() == 4 && ws.len() == 4, "conv2d wants NCHW input and OIkk weight");
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], c, "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
    assert_eq!(ws[3], k, "conv2d kernel must be square");
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let p = ho * wo;
    let ckk = c * k * k;
    let cols = im2col(x.data(), n, c, h, wd, k, stride, pad, ho, wo);
    let mut flat = vec![T::zero(); o * n * p];
    T::gemm(
        o,
        ckk,
        n * p,
        T::one(),
        w.data(),
        ckk as isize,
        1,
        &cols,
        (n * p) as isize,
        1,
        T::zero(),
        &mut flat,
        (n * p) as isize,
        1,
    );
    let mut out = vec![T::zero(); n * o * p];
    for oi in 0..o {
        let bias = b.map(|b| b.data()[oi]).unwrap_or(T::zero());
        for ni in 0..n {
            let src = &flat[oi * n * p + ni * p..oi * n * p + (ni + 1) * p];
            let dst = &mut out[(ni * o + oi) * p..(ni * o + oi + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    Tensor::new(vec![n, o, ho, wo], out)
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ws[0], ws[2]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let p = ho * wo;
    let ckk = c * k * k;
    // [O, N·P] view of the incoming gradient
    let mut gflat = vec![T::zero(); o * n * p];
    for ni in 0..n {
        for oi in 0..o {
            let src = &g.data()[(ni * o + oi) * p..(ni * o + oi + 1) * p];
            gflat[oi * n * p + ni * p..oi * n * p + (ni + 1) * p].copy_from_slice(src);
        }
    }
    let gb = need_b.then(|| {
        let data = gflat.chunks(n * p).map(|r| r.iter().copied().sum()).collect();
        Tensor::new(vec![o], data)
    });
    let gw = need_w.then(|| {
        let cols = im2col(x.data(), n, c, h, wd, k, stride, pad, ho, wo);
        let mut gw = vec![T::zero(); o * ckk];
        T::gemm(
            o,
            n * p,
            ckk,
            T::one(),
            &gflat,
            (n * p) as isize,
            1,
            &cols,
            1,
            (n * p) as isize,
            T::zero(),
            &mut gw,
            ckk as isize,
            1,
        );
        Tensor::new(ws.to_vec(), gw)
    });
    let gx = need_x.then(|| {
        let mut gcols = vec![T::zero(); ckk * n * p];
        T::gemm(
            ckk,
            o,
            n * p,
            T::one(),
            w.data(),
            1,
            ckk as isize,
            &gflat,
            (n * p) as isize,
            1,
            T::zero(),
            &mut gcols,
            (n * p) as isize,
            1,
        );
        Tensor::new(xs.to_vec(), col2im(&gcols, n, c, h, wd, k, stride, pad, ho, wo))
    });
    (gx, gw, gb)
}

fn taps<T: Elem>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: T::cast_from(1.0 - frac),
                w1: T::cast_from(frac),
            }
        })
        .collect()
}

fn resize_forward<T: Elem>(x: &Tensor<T>, rows: &[Tap<T>], cols: &[Tap<T>]) -> Tensor<T> {
    let s = x.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![T::zero(); nc * oh * ow];
    for p in 0..nc {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, r) in rows.iter().enumerate() {
            for (ox, cl) in cols.iter().enumerate() {
                let top = src[r.i0 * w + cl.i0] * cl.w0 + src[r.i0 * w + cl.i1] * cl.w1;
                let bot = src[r.i1 * w + cl.i0] * cl.w0 + src[r.i1 * w + cl.i1] * cl.w1;
                dst[oy * ow + ox] = top * r.w0 + bot * r.w1;
            }
        }
    }
    Tensor::new(vec![s[0], s[1], oh, ow], out)
}

fn resize_backward<T: Elem>(g: &Tensor<T>, in_shape: &[usize], rows: &[Tap<T>], cols: &[Tap<T>]) -> Tensor<T> {
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (rows.len(), cols.len());
    let mut gx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, r) in rows.iter().enumerate() {
            for (ox, cl) in cols.iter().enumerate() {
                let v = src[oy * ow + ox];
                let (a, b) = (v * r.w0, v * r.w1);
                dst[r.i0 * w + cl.i0] = dst[r.i0 * w + cl.i0] + a * cl.w0;
                dst[r.i0 * w + cl.i1] = dst[r.i0 * w + cl.i1] + a * cl.w1;
                dst[r.i1 * w + cl.i0] = dst[r.i1 * w + cl.i0] + b * cl.w0;
                dst[r.i1 * w + cl.i1] = dst[r.i1 * w + cl.i1] + b * cl.w1;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `build` (which must end in a scalar) w.r.t. every input.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).expect("missing gradient");
            for j in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
                assert!(err < 1e-5, "input {i} elem {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn broadcast_arithmetic_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[2, 3, 2, 2], &mut rng);
        let b = random(&[1, 3, 1, 1], &mut rng);
        let c = random(&[2, 3, 1, 1], &mut rng);
        check(vec![a, b, c], |g, v| {
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[2]);
            let d = g.sub(m, v[1]);
            let sq = g.square(d);
            g.sum_all(sq)
        });
    }

    #[test]
    fn matmul_gradients_all_transpositions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = random(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, &mut rng);
            let b = random(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, &mut rng);
            check(vec![a, b], |g, v| {
                let m = g.matmul_t(v[0], v[1], ta, tb);
                let s = g.square(m);
                g.sum_all(s)
            });
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let x = random(&[2, 2, 5, 5], &mut rng);
            let w = random(&[3, 2, k, k], &mut rng);
            let b = random(&[3], &mut rng);
            check(vec![x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                let s = g.square(y);
                g.sum_all(s)
            });
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 6, 5], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let (stride, pad) = (2, 1);
        let y = conv2d_forward(&x, &w, None, stride, pad);
        let (ho, wo) = (y.shape()[2], y.shape()[3]);
        for n in 0..2 {
            for o in 0..4 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if (0..6).contains(&iy) && (0..5).contains(&ix) {
                                        acc += x.data()[((n * 3 + c) * 6 + iy as usize) * 5 + ix as usize]
                                            * w.data()[((o * 3 + c) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((n * 4 + o) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 4, 3, 3], &mut rng);
        let w = random(&[2, 4, 3, 3], &mut rng);
        check(vec![x, w], |g, v| {
            let n = g.group_norm(v[0], 2, 1e-5);
            let a = g.silu(n);
            let m = g.mul(a, v[1]);
            g.sum_all(m)
        });
        let x = random(&[3, 5], &mut rng);
        let w = random(&[3, 5], &mut rng);
        check(vec![x.clone(), w.clone()], |g, v| {
            let s = g.softmax(v[0]);
            let m = g.mul(s, v[1]);
            g.sum_all(m)
        });
        check(vec![x.clone(), w.clone()], |g, v| {
            let s = g.log_softmax(v[0]);
            let m = g.mul(s, v[1]);
            g.mean_all(m)
        });
        check(vec![x, w], |g, v| {
            let s = g.l2_normalize(v[0]);
            let m = g.mul(s, v[1]);
            let r = g.sum_last(m);
            let q = g.square(r);
            g.sum_all(q)
        });
    }

    #[test]
    fn layout_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[2, 3, 2, 2], &mut rng);
        let y = random(&[2, 1, 2, 2], &mut rng);
        let w = random(&[2, 4, 4, 4], &mut rng);
        check(vec![x, y, w], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1);
            let u = g.upsample2x(c);
            let p = g.permute(u, &[0, 2, 3, 1]);
            let r = g.reshape(p, &[2, 4, 4, 4]);
            let m = g.mul(r, v[2]);
            g.sum_all(m)
        });
    }

    #[test]
    fn resize_gradients_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let w = random(&[1, 2, 8, 8], &mut rng);
        check(vec![x, w], |g, v| {
            let r = g.resize_bilinear(v[0], 8, 8);
            let m = g.mul(r, v[1]);
            g.sum_all(m)
        });
        // exact 2x downsampling averages 2x2 blocks
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let mut g = Graph::new();
        let v = g.constant(x);
        let r = g.resize_bilinear(v, 1, 1);
        assert!((g.value(r).item() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn clamp_is_straight_through() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64(&[3], &[-2.0, 0.5, 3.0]));
        let c = g.clamp_straight_through(x, -1.0, 1.0);
        assert_eq!(g.value(c).data(), &[-1.0, 0.5, 1.0]);
        let s = g.sum_all(c);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2], &[1.0, 2.0]));
        let b = g.variable(Tensor::from_f64(&[2], &[3.0, 4.0]));
        let m = g.mul(a, b);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }
}
