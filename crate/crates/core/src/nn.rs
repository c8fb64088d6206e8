//! Named parameters and the small layers built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// A trainable (or frozen) tensor with a unique dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies. Off for biases, norm gains
    /// and the SSM `A_log`/`D` vectors.
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        Self {
            name: name.into(),
            value: value.with_requires_grad(true),
            decay,
        }
    }

    pub fn var(&self, g: &mut Graph<T>) -> Result<Var> {
        g.param(&self.name, &self.value)
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn freeze(&mut self) {
        self.value.requires_grad = false;
    }

    pub fn is_trainable(&self) -> bool {
        self.value.requires_grad
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.name.clone()));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }

    fn freeze(&mut self) {
        self.visit_mut(&mut |p| p.freeze());
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.value.zero_grad());
    }

    /// Pulls the gradients of every parameter used in `g` into the
    /// parameters' own buffers.
    fn accumulate_grads(&mut self, g: &Graph<T>) -> Result<()> {
        let mut res = Ok(());
        self.visit_mut(&mut |p| {
            if let Some(grad) = g.param_grad(&p.name) {
                if res.is_ok() {
                    res = p.value.accumulate_grad(grad);
                }
            }
        });
        res
    }
}

/// Seeded parameter initialiser. Draws in `f64` and casts, so `f32` and
/// `f64` models built from the same seed hold the same values.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::from_f64(shape, &data).expect("shape matches")
    }

    pub fn normal<T: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_f64(shape, &data).expect("shape matches")
    }

    pub fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        (self.rng.random_range(lo.ln()..hi.ln())).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform `±1/√fan_in` weights; zero bias.
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), init.uniform(vec![d_in, d_out], bound), true),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(vec![d_out]), false)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.weight.var(g)?;
        let b = self.bias.as_ref().map(|b| b.var(g)).transpose()?;
        g.linear(x, w, b)
    }

    /// Graph-free single-row application.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut y = kernels::vecmat(x, self.weight.data(), self.d_out());
        if let Some(b) = &self.bias {
            y.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
        }
        y
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsNorm<T> {
    pub weight: Param<T>,
}

impl<T: Scalar> RmsNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::full(vec![dim], T::one()), false),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.weight.var(g)?;
        g.rms_norm(x, w, NORM_EPS)
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        kernels::rms_norm_row(x, self.weight.data(), T::from_f64(NORM_EPS), &mut out);
        out
    }
}

impl<T: Scalar> Module<T> for RmsNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}
