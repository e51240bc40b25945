//! Parameters, layers and the Adam optimizer shared by every network in the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::{softplus, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx].value
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.params[idx].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Replace values from another set with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape(self.len(), other.len()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::shape(
                    (&dst.name, dst.value.shape()),
                    (&src.name, src.value.shape()),
                ));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct DropoutState {
    rate: f64,
    seed: u64,
    calls: u64,
}

/// One forward pass: the tape plus the parameter bindings and stochastic hooks.
pub struct Session<T: Scalar> {
    pub g: Graph<T>,
    params: Vec<Var>,
    dropout: Option<DropoutState>,
}

impl<T: Scalar> Session<T> {
    /// Parameters become differentiable leaves when `trainable`, constants otherwise.
    pub fn new(params: &ParamSet<T>, trainable: bool) -> Self {
        let mut g = Graph::new();
        let vars = params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Session {
            g,
            params: vars,
            dropout: None,
        }
    }

    /// Activate dropout for the rest of this pass; masks derive from `seed` and call order.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some(DropoutState {
                rate,
                seed,
                calls: 0,
            });
        }
        self
    }

    pub fn p(&self, idx: usize) -> Var {
        self.params[idx]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some(state) = self.dropout.as_mut() else {
            return x;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(
            state
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(state.calls),
        );
        state.calls += 1;
        let keep = 1.0 - state.rate;
        let coin = Bernoulli::new(keep).expect("dropout rate in [0, 1)");
        let scale = T::of(1.0 / keep);
        let shape = self.g.value(x).shape();
        let mask: Vec<T> = (0..shape.iter().product::<usize>())
            .map(|_| {
                if coin.sample(&mut rng) {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let m = self
            .g
            .constant(Tensor::from_vec(shape, mask).expect("mask shape"));
        self.g.mul(x, m)
    }

    /// Gradients of `loss` for every parameter, in parameter order.
    pub fn param_grads(&self, loss: Var) -> Vec<Tensor<T>> {
        let mut grads: Gradients<T> = self.g.backward(loss);
        self.params
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.g.value(v).shape()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal scaled by the given gain.
    He(f64),
    Zero,
}

/// Deterministic parameter factory.
pub struct Builder<'a, T: Scalar> {
    pub params: &'a mut ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, seed: u64) -> Self {
        Builder {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn tensor(&mut self, name: &str, shape: [usize; 4], init: Init) -> usize {
        let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
        let data: Vec<T> = match init {
            Init::Zero => vec![T::zero(); shape.iter().product()],
            Init::He(gain) => {
                let std = gain * (2.0 / fan_in).sqrt();
                (0..shape.iter().product::<usize>())
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut self.rng);
                        T::of(e * std)
                    })
                    .collect()
            }
        };
        self.params
            .push(name, Tensor::from_vec(shape, data).expect("init shape"))
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        self.conv_init(name, cin, cout, k, Init::He(1.0), 0.0)
    }

    pub fn conv_init(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
        bias: f64,
    ) -> Conv {
        let w = self.tensor(&format!("{name}.w"), [cout, cin, k, k], init);
        let b = self.params.push(
            format!("{name}.b"),
            Tensor::full([1, cout, 1, 1], T::of(bias)),
        );
        Conv { w, b }
    }

    pub fn block(&mut self, name: &str, cin: usize, cout: usize) -> ConvBlock {
        ConvBlock {
            first: self.conv(&format!("{name}.0"), cin, cout, 3),
            second: self.conv(&format!("{name}.1"), cout, cout, 3),
        }
    }
}

/// Convolution layer referring to its parameters by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn apply<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Var {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.g.conv2d(x, w, Some(b))
    }
}

/// Two 3x3 convolutions, each followed by SiLU, then optional dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ConvBlock {
    pub fn apply<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Var {
        let h = self.first.apply(s, x);
        let h = s.g.silu(h);
        let h = self.second.apply(s, h);
        let h = s.g.silu(h);
        s.dropout(h)
    }
}

/// Maps a pre-activation to a strictly positive scale: `softplus(x) + floor`.
pub fn positive<T: Scalar>(s: &mut Session<T>, pre: Var, floor: f64) -> Var {
    let sp = s.g.softplus(pre);
    s.g.add_scalar(sp, T::of(floor))
}

/// Bias that makes `softplus(bias) + floor == target`.
pub fn inverse_positive(target: f64, floor: f64) -> f64 {
    let t = (target - floor).max(1e-12);
    (t.exp() - 1.0).ln()
}

/// Softplus applied outside a graph.
pub fn positive_value<T: Scalar>(pre: T, floor: f64) -> T {
    softplus(pre) + T::of(floor)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.config.learning_rate = learning_rate;
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.t));
        let bc2 = T::one() - T::of(c.beta2.powi(self.t));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.eps);
        for (idx, g) in grads.iter().enumerate() {
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let p = params.get_mut(idx).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("x", Tensor::full([1, 1, 1, 2], 3.0));
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
            &ps,
        );
        for _ in 0..500 {
            let mut s = Session::new(&ps, true);
            let target =
                s.g.constant(Tensor::from_vec([1, 1, 1, 2], vec![1.0, -2.0]).unwrap());
            let x = s.p(0);
            let l = s.g.squared_error(x, target);
            let grads = s.param_grads(l);
            opt.step(&mut ps, &grads);
        }
        let x = ps.get(0).data();
        assert!(
            (x[0] - 1.0).abs() < 1e-3 && (x[1] + 2.0).abs() < 1e-3,
            "{x:?}"
        );
    }

    #[test]
    fn dropout_is_seeded() {
        let ps = ParamSet::<f64>::new();
        let run = |seed| {
            let mut s = Session::new(&ps, false).with_dropout(0.5, seed);
            let x = s.g.constant(Tensor::full([1, 1, 8, 8], 1.0));
            let y = s.dropout(x);
            s.g.value(y).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert!(run(3).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn inverse_positive_roundtrip() {
        let b = inverse_positive(0.7, 1e-5);
        assert!((positive_value(b, 1e-5) - 0.7f64).abs() < 1e-12);
    }
}
