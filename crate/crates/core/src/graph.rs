//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Only nodes reachable from a differentiable leaf
//! carry gradients, so constant inputs never pay for backpropagation.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Silu(Var),
    Softplus(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Broadcast(Var),
    GlobalAvgPool(Var),
    RepeatBatch(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    SquaredError(Var, Var),
    GaussianKl {
        mu_q: Var,
        sigma_q: Var,
        mu_p: Var,
        sigma_p: Var,
    },
    HeteroNll {
        mu: Var,
        sigma: Var,
        target: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every differentiable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Differentiable input (parameters, or anything a test wants gradients for).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Same-padded convolution with an odd square kernel `w: [out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a, c), ng)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let q = T::of(0.25);
        for i in 0..n {
            for ch in 0..c {
                let src = x.plane(i, ch);
                let dst = out.plane_mut(i, ch);
                for y in 0..ho {
                    for xx in 0..wo {
                        let s = src[2 * y * w + 2 * xx]
                            + src[2 * y * w + 2 * xx + 1]
                            + src[(2 * y + 1) * w + 2 * xx]
                            + src[(2 * y + 1) * w + 2 * xx + 1];
                        dst[y * wo + xx] = s * q;
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::AvgPool2(a), ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let wo = 2 * w;
        let mut out = Tensor::zeros([n, c, 2 * h, wo]);
        for i in 0..n {
            for ch in 0..c {
                let src = x.plane(i, ch);
                let dst = out.plane_mut(i, ch);
                for y in 0..2 * h {
                    let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                    for (xx, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                        *d = srow[xx / 2];
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Upsample2(a), ng)
    }

    /// Channel concatenation of tensors with equal batch and spatial dims.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape();
        let c_total: usize = parts.iter().map(|&p| self.value(p).c()).sum();
        let [n, _, h, w] = first;
        let mut out = Tensor::zeros([n, c_total, h, w]);
        for i in 0..n {
            let dst = out.item_mut(i);
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.item(i);
                assert_eq!(
                    self.nodes[p.0].value.shape()[2..],
                    first[2..],
                    "concat spatial mismatch"
                );
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    /// Spread a `[n, c, 1, 1]` tensor over an `h x w` grid.
    pub fn broadcast(&mut self, a: Var, h: usize, w: usize) -> Var {
        let x = self.value(a);
        let [n, c, _, _] = x.shape();
        let mut out = Tensor::zeros([n, c, h, w]);
        for i in 0..n {
            for ch in 0..c {
                let v = x.at(i, ch, 0, 0);
                out.plane_mut(i, ch).fill(v);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Broadcast(a), ng)
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let inv = T::one() / T::of((h * w) as f64);
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for i in 0..n {
            for ch in 0..c {
                let s: T = x.plane(i, ch).iter().copied().sum();
                out.set(i, ch, 0, 0, s * inv);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::GlobalAvgPool(a), ng)
    }

    /// Tile a tensor `times` along the batch axis (item-major: all copies of item 0 first).
    pub fn repeat_batch(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let mut data = Vec::with_capacity(x.numel() * times);
        for i in 0..n {
            for _ in 0..times {
                data.extend_from_slice(x.item(i));
            }
        }
        let out = Tensor::from_vec([n * times, c, h, w], data).expect("repeat shape");
        let ng = self.ng(a);
        self.push(out, Op::RepeatBatch(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// `Σ weight_i · term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms
            .iter()
            .map(|&(v, wgt)| self.value(v).value() * wgt)
            .fold(T::zero(), |a, b| a + b);
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// `Σ (a - b)²`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Var {
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .fold(T::zero(), |s, v| s + v);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(total), Op::SquaredError(a, b), ng)
    }

    /// Closed-form `KL(N(mu_q, sigma_q²) || N(mu_p, sigma_p²))` summed over all elements.
    pub fn gaussian_kl(&mut self, mu_q: Var, sigma_q: Var, mu_p: Var, sigma_p: Var) -> Var {
        let total = kl_sum(
            self.value(mu_q).data(),
            self.value(sigma_q).data(),
            self.value(mu_p).data(),
            self.value(sigma_p).data(),
        );
        let ng = [mu_q, sigma_q, mu_p, sigma_p].iter().any(|&v| self.ng(v));
        self.push(
            Tensor::scalar(total),
            Op::GaussianKl {
                mu_q,
                sigma_q,
                mu_p,
                sigma_p,
            },
            ng,
        )
    }

    /// Gaussian negative log-likelihood with a per-pixel scale shared across channels:
    /// `Σ ½[(t - mu)²/sigma² + ln sigma²]`, additive constant omitted.
    /// `mu, target: [n, c, h, w]`, `sigma: [n, 1, h, w]`.
    pub fn hetero_nll(&mut self, mu: Var, sigma: Var, target: Var) -> Var {
        let (m, s, t) = (self.value(mu), self.value(sigma), self.value(target));
        let [n, c, _, _] = m.shape();
        let mut total = T::zero();
        for i in 0..n {
            let sp = s.plane(i, 0);
            for ch in 0..c {
                for ((&mv, &tv), &sv) in m.plane(i, ch).iter().zip(t.plane(i, ch)).zip(sp) {
                    let r = tv - mv;
                    total += T::of(0.5) * r * r / (sv * sv) + sv.ln();
                }
            }
        }
        let ng = self.ng(mu) || self.ng(sigma) || self.ng(target);
        self.push(
            Tensor::scalar(total),
            Op::HeteroNll { mu, sigma, target },
            ng,
        )
    }

    /// Pixel-wise softmax cross-entropy summed over all pixels; `labels` is `[n, h, w]` flattened.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Var {
        let x = self.value(logits);
        let [n, c, h, w] = x.shape();
        assert_eq!(labels.len(), n * h * w, "label count");
        let hw = h * w;
        let mut total = T::zero();
        for i in 0..n {
            for p in 0..hw {
                let lse = log_sum_exp((0..c).map(|ch| x.plane(i, ch)[p]));
                total += lse - x.plane(i, labels[i * hw + p])[p];
            }
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let gy = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(idx, gy, &mut grads);
        }
        // only leaves keep their gradients
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = conv_backward(
                    self.value(*x),
                    self.value(*w),
                    &gy,
                    self.ng(*x),
                    self.ng(*w) || b.is_some_and(|b| self.ng(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, gy.clone());
                }
                self.accumulate(grads, *b, gy);
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, gy.clone());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let g = gy.zip_map(self.value(*b), |g, y| g * y);
                    self.accumulate(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = gy.zip_map(self.value(*a), |g, x| g * x);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, gy.map(|g| g * c));
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, gy),
            Op::Silu(a) => {
                let g = gy.zip_map(self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                });
                self.accumulate(grads, *a, g);
            }
            Op::Softplus(a) => {
                let g = gy.zip_map(self.value(*a), |g, x| g * sigmoid(x));
                self.accumulate(grads, *a, g);
            }
            Op::AvgPool2(a) => {
                let [n, c, h, w] = self.value(*a).shape();
                let wo = w / 2;
                let q = T::of(0.25);
                let mut dx = Tensor::zeros([n, c, h, w]);
                for i in 0..n {
                    for ch in 0..c {
                        let src = gy.plane(i, ch);
                        let dst = dx.plane_mut(i, ch);
                        for y in 0..h {
                            for xx in 0..w {
                                dst[y * w + xx] = src[(y / 2) * wo + xx / 2] * q;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Upsample2(a) => {
                let [n, c, h, w] = self.value(*a).shape();
                let wi = 2 * w;
                let mut dx = Tensor::zeros([n, c, h, w]);
                for i in 0..n {
                    for ch in 0..c {
                        let src = gy.plane(i, ch);
                        let dst = dx.plane_mut(i, ch);
                        for y in 0..2 * h {
                            for xx in 0..wi {
                                dst[(y / 2) * w + xx / 2] += src[y * wi + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Concat(parts) => {
                let n = gy.n();
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let len = shape[1] * shape[2] * shape[3];
                    if self.ng(p) {
                        let mut dp = Tensor::zeros(shape);
                        for i in 0..n {
                            dp.item_mut(i).copy_from_slice(&gy.item(i)[off..off + len]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += len;
                }
            }
            Op::Broadcast(a) => {
                let shape = self.value(*a).shape();
                let mut dx = Tensor::zeros(shape);
                for i in 0..shape[0] {
                    for ch in 0..shape[1] {
                        let s: T = gy.plane(i, ch).iter().copied().sum();
                        dx.set(i, ch, 0, 0, s);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.value(*a).shape();
                let inv = T::one() / T::of((shape[2] * shape[3]) as f64);
                let mut dx = Tensor::zeros(shape);
                for i in 0..shape[0] {
                    for ch in 0..shape[1] {
                        let g = gy.at(i, ch, 0, 0) * inv;
                        dx.plane_mut(i, ch).fill(g);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::RepeatBatch(a) => {
                let shape = self.value(*a).shape();
                let times = gy.n() / shape[0];
                let mut dx = Tensor::zeros(shape);
                for i in 0..shape[0] {
                    let dst = dx.item_mut(i);
                    for r in 0..times {
                        for (d, &g) in dst.iter_mut().zip(gy.item(i * times + r)) {
                            *d += g;
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let g = gy.value();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::WeightedSum(terms) => {
                let g = gy.value();
                for &(v, wgt) in terms {
                    self.accumulate(grads, v, Tensor::scalar(g * wgt));
                }
            }
            Op::SquaredError(a, b) => {
                let g2 = gy.value() * T::of(2.0);
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * g2);
                if self.ng(*b) {
                    self.accumulate(grads, *b, diff.map(|d| -d));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::GaussianKl {
                mu_q,
                sigma_q,
                mu_p,
                sigma_p,
            } => {
                let g = gy.value();
                let (mq, sq, mp, sp) = (
                    self.value(*mu_q),
                    self.value(*sigma_q),
                    self.value(*mu_p),
                    self.value(*sigma_p),
                );
                let shape = mq.shape();
                let len = mq.numel();
                let mut dmq = vec![T::zero(); len];
                let mut dsq = vec![T::zero(); len];
                let mut dmp = vec![T::zero(); len];
                let mut dsp = vec![T::zero(); len];
                for k in 0..len {
                    let (a, s1, b, s2) = (mq.data()[k], sq.data()[k], mp.data()[k], sp.data()[k]);
                    let d = a - b;
                    let inv2 = T::one() / (s2 * s2);
                    dmq[k] = g * d * inv2;
                    dmp[k] = -g * d * inv2;
                    dsq[k] = g * (s1 * inv2 - T::one() / s1);
                    dsp[k] = g * (T::one() / s2 - (s1 * s1 + d * d) * inv2 / s2);
                }
                let mk = |v| Tensor::from_vec(shape, v).expect("kl grad shape");
                self.accumulate(grads, *mu_q, mk(dmq));
                self.accumulate(grads, *sigma_q, mk(dsq));
                self.accumulate(grads, *mu_p, mk(dmp));
                self.accumulate(grads, *sigma_p, mk(dsp));
            }
            Op::HeteroNll { mu, sigma, target } => {
                let g = gy.value();
                let (m, s, t) = (self.value(*mu), self.value(*sigma), self.value(*target));
                let [n, c, _, _] = m.shape();
                let mut dmu = Tensor::zeros(m.shape());
                let mut dsig = Tensor::zeros(s.shape());
                for i in 0..n {
                    for ch in 0..c {
                        let sp = s.plane(i, 0).to_vec();
                        let mp = m.plane(i, ch).to_vec();
                        let tp = t.plane(i, ch);
                        let dm = dmu.plane_mut(i, ch);
                        for p in 0..sp.len() {
                            let r = tp[p] - mp[p];
                            dm[p] = -g * r / (sp[p] * sp[p]);
                        }
                        let ds = dsig.plane_mut(i, 0);
                        for p in 0..sp.len() {
                            let r = tp[p] - mp[p];
                            let sv = sp[p];
                            ds[p] += g * (T::one() / sv - r * r / (sv * sv * sv));
                        }
                    }
                }
                if self.ng(*target) {
                    self.accumulate(grads, *target, dmu.map(|v| -v));
                }
                self.accumulate(grads, *mu, dmu);
                self.accumulate(grads, *sigma, dsig);
            }
            Op::SoftmaxCe { logits, labels } => {
                let g = gy.value();
                let x = self.value(*logits);
                let [n, c, h, w] = x.shape();
                let hw = h * w;
                let mut dx = Tensor::zeros(x.shape());
                for i in 0..n {
                    for p in 0..hw {
                        let lse = log_sum_exp((0..c).map(|ch| x.plane(i, ch)[p]));
                        for ch in 0..c {
                            let mut v = (x.plane(i, ch)[p] - lse).exp();
                            if ch == labels[i * hw + p] {
                                v -= T::one();
                            }
                            dx.plane_mut(i, ch)[p] = g * v;
                        }
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(vals: impl Iterator<Item = T> + Clone) -> T {
    let m = vals.clone().fold(T::neg_infinity(), T::max);
    m + vals.map(|v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn kl_sum<T: Scalar>(mu_q: &[T], sigma_q: &[T], mu_p: &[T], sigma_p: &[T]) -> T {
    let half = T::of(0.5);
    mu_q.iter()
        .zip(sigma_q)
        .zip(mu_p.iter().zip(sigma_p))
        .map(|((&a, &s1), (&b, &s2))| {
            let d = a - b;
            (s2 / s1).ln() + (s1 * s1 + d * d) / (T::of(2.0) * s2 * s2) - half
        })
        .fold(T::zero(), |acc, v| acc + v)
}

fn im2col<T: Scalar>(src: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(T::zero());
                    drow[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x0 as isize + dx) as usize;
                    for (p, &v) in prow[s0..s0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                        *p += v;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, k2] = w.shape();
    assert!(
        wcin == cin && k == k2 && k % 2 == 1,
        "conv2d: input {:?} incompatible with kernel {:?}",
        x.shape(),
        w.shape()
    );
    let kk = cin * k * k;
    let hw = h * wd;
    let wmat = ArrayView2::from_shape((cout, kk), w.data()).expect("kernel view");
    let mut out = Tensor::zeros([n, cout, h, wd]);
    let mut col = if k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw]
    };
    for i in 0..n {
        let beta = match b {
            Some(b) => {
                let dst = out.item_mut(i);
                for (co, &bv) in b.data().iter().enumerate() {
                    dst[co * hw..(co + 1) * hw].fill(bv);
                }
                T::one()
            }
            None => T::zero(),
        };
        let colv = if k == 1 {
            ArrayView2::from_shape((cin, hw), x.item(i)).expect("input view")
        } else {
            im2col(x.item(i), cin, h, wd, k, &mut col);
            ArrayView2::from_shape((kk, hw), &col[..]).expect("col view")
        };
        let mut o = ArrayViewMut2::from_shape((cout, hw), out.item_mut(i)).expect("out view");
        general_mat_mul(T::one(), &wmat, &colv, beta, &mut o);
    }
    out
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    want_dx: bool,
    want_dw: bool,
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let kk = cin * k * k;
    let hw = h * wd;
    let wmat = ArrayView2::from_shape((cout, kk), w.data()).expect("kernel view");
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = want_dw.then(|| Tensor::zeros([1, cout, 1, 1]));
    let mut col = if k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw]
    };
    let mut dcol = if k == 1 || !want_dx {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw]
    };
    for i in 0..n {
        let g = ArrayView2::from_shape((cout, hw), gy.item(i)).expect("grad view");
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let colv = if k == 1 {
                ArrayView2::from_shape((cin, hw), x.item(i)).expect("input view")
            } else {
                im2col(x.item(i), cin, h, wd, k, &mut col);
                ArrayView2::from_shape((kk, hw), &col[..]).expect("col view")
            };
            let mut dwm = ArrayViewMut2::from_shape((cout, kk), dw.data_mut()).expect("dw view");
            general_mat_mul(T::one(), &g, &colv.t(), T::one(), &mut dwm);
            for (co, d) in db.data_mut().iter_mut().enumerate() {
                *d += gy.item(i)[co * hw..(co + 1) * hw]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            if k == 1 {
                let mut dxm =
                    ArrayViewMut2::from_shape((cin, hw), dx.item_mut(i)).expect("dx view");
                general_mat_mul(T::one(), &wmat.t(), &g, T::zero(), &mut dxm);
            } else {
                let mut dcm =
                    ArrayViewMut2::from_shape((kk, hw), &mut dcol[..]).expect("dcol view");
                general_mat_mul(T::one(), &wmat.t(), &g, T::zero(), &mut dcm);
                col2im(&dcol, cin, h, wd, k, dx.item_mut(i));
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Finite-difference check of d(loss)/d(leaf) for a graph-building closure.
    fn check_grad(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("leaf gradient");
            for e in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].data_mut()[e] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.into_iter().map(|t| g.leaf(t)).collect();
                    let l = build(&mut g, &vars);
                    g.value(l).value()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                // relative tolerance plus an absolute term covering FD round-off
                let tol = 1e-5 * a.abs().max(fd.abs()) + 1e-8;
                assert!(
                    (a - fd).abs() < tol,
                    "input {k} elem {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv3_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor([2, 3, 5, 4], &mut rng);
        let w = rand_tensor([2, 3, 3, 3], &mut rng);
        let b = rand_tensor([1, 2, 1, 1], &mut rng);
        let out = conv_forward(&x, &w, Some(&b));
        for n in 0..2 {
            for co in 0..2 {
                for y in 0..5 {
                    for xx in 0..4 {
                        let mut s = b.data()[co];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if (0..5).contains(&sy) && (0..4).contains(&sx) {
                                        s += w.at(co, ci, ky, kx)
                                            * x.at(n, ci, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        assert!((out.at(n, co, y, xx) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_and_pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_tensor([2, 2, 4, 4], &mut rng),
            rand_tensor([3, 2, 3, 3], &mut rng),
            rand_tensor([1, 3, 1, 1], &mut rng),
            rand_tensor([1, 3, 1, 1], &mut rng),
            rand_tensor([2, 3, 4, 4], &mut rng),
        ];
        check_grad(inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]));
            let y = g.silu(y);
            let p = g.avg_pool2(y);
            let u = g.upsample2(p);
            let c = g.concat(&[u, v[0]]);
            let w1 = g.constant(Tensor::full([3, 5, 1, 1], 0.3));
            let z = g.conv2d(c, w1, Some(v[3]));
            let s = g.softplus(z);
            let m = g.mul(s, v[4]);
            let gp = g.global_avg_pool(m);
            let bc = g.broadcast(gp, 4, 4);
            let d = g.sub(bc, v[4]);
            let e = g.scale(d, 0.7);
            let e = g.add_scalar(e, 0.1);
            let rep = g.repeat_batch(e, 3);
            let sq = g.mul(rep, rep);
            g.sum(sq)
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos = |t: Tensor<f64>| t.map(|v| v.abs() + 0.3);
        let inputs = vec![
            rand_tensor([2, 2, 2, 2], &mut rng),
            pos(rand_tensor([2, 2, 2, 2], &mut rng)),
            rand_tensor([2, 2, 2, 2], &mut rng),
            pos(rand_tensor([2, 2, 2, 2], &mut rng)),
            pos(rand_tensor([2, 1, 2, 2], &mut rng)),
            rand_tensor([2, 3, 2, 2], &mut rng),
        ];
        let labels = vec![0, 1, 2, 1, 2, 0, 0, 1];
        check_grad(inputs, move |g, v| {
            let kl = g.gaussian_kl(v[0], v[1], v[2], v[3]);
            let se = g.squared_error(v[0], v[2]);
            let nll = g.hetero_nll(v[0], v[4], v[2]);
            let ce = g.softmax_ce(v[5], &labels);
            g.weighted_sum(&[(kl, 1.5), (se, -0.5), (nll, 0.25), (ce, 2.0)])
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let b = g.leaf(Tensor::full([1, 1, 2, 2], 2.0));
        let m = g.mul(a, b);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0; 4]);
    }
}
