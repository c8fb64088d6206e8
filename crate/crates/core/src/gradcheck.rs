//! Finite-difference checks of analytic gradients.
//!
//! Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)` where
//! `floor = max(1e-8, 1e-4 · max|n|)` over all coordinates of one check:
//! entries four orders of magnitude below the largest gradient sit at the
//! resolution of the difference quotient and are compared against that
//! scale instead of their own.
//!
//! [`finite_diff_check`] differentiates numerically in the same precision
//! as the analytic pass, with a two-point central difference. At 32-bit
//! that estimate carries roundoff of order `u₃₂·|f|/eps ≈ 1e-4·|f|`, which
//! swamps a `1e-3` tolerance, so [`check_inputs`] and [`check_params`] take
//! functions that can be evaluated in any precision: the analytic gradient
//! is computed in `T` and a fourth-order five-point difference in `f64` on
//! identical values.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Module;
use crate::tensor::{DType, Scalar, Tensor};

const DENOM_FLOOR: f64 = 1e-8;
const SCALE_FLOOR: f64 = 1e-4;

/// Step for the promoted five-point oracle; its truncation error is
/// `O(eps⁴)` and its roundoff `O(u₆₄/eps)`.
pub const ORACLE_EPS: f64 = 1e-3;

/// Default step for same-precision checks: `1e-3` at 32-bit, `1e-5` at 64-bit.
pub fn default_eps<T: Scalar>() -> f64 {
    match T::DTYPE {
        DType::F32 => 1e-3,
        DType::F64 => 1e-5,
    }
}

/// Tolerance the gradient suites hold each precision to.
pub fn default_tolerance<T: Scalar>() -> f64 {
    match T::DTYPE {
        DType::F32 => 1e-3,
        DType::F64 => 1e-5,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
    pub coords_checked: usize,
}

/// The coordinate with the largest relative error.
#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Default)]
struct Samples(Vec<(String, usize, f64, f64)>);

impl Samples {
    fn push(&mut self, input: &str, index: usize, analytic: f64, numeric: f64) {
        self.0.push((input.to_owned(), index, analytic, numeric));
    }

    fn report(self) -> GradCheckReport {
        let scale = self.0.iter().map(|s| s.3.abs()).fold(0.0, f64::max);
        let floor = DENOM_FLOOR.max(SCALE_FLOOR * scale);
        let mut r = GradCheckReport {
            coords_checked: self.0.len(),
            ..GradCheckReport::default()
        };
        for (input, index, analytic, numeric) in self.0 {
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if err > r.max_rel_error || r.worst.is_none() {
                r.max_rel_error = r.max_rel_error.max(err);
                r.worst = Some(Worst {
                    input,
                    index,
                    analytic,
                    numeric,
                });
            }
        }
        r
    }
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.coords_checked += other.coords_checked;
        if other.max_rel_error >= self.max_rel_error && other.worst.is_some() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Relative error with the fixed `1e-8` floor, for a single coordinate.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Copy)]
enum Stencil {
    Central,
    FivePoint,
}

impl Stencil {
    fn estimate(self, eps: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        match self {
            Stencil::Central => Ok((f(eps)? - f(-eps)?) / (2.0 * eps)),
            Stencil::FivePoint => {
                let near = f(eps)? - f(-eps)?;
                let far = f(2.0 * eps)? - f(-2.0 * eps)?;
                Ok((8.0 * near - far) / (12.0 * eps))
            }
        }
    }
}

fn eval_scalar<T: Scalar>(g: &Graph<T>, out: Var) -> Result<f64> {
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok(g.item(out).as_f64())
}

/// Finite differences of `eval` around `inputs`, one coordinate at a time.
fn numeric_inputs<T, E>(
    eval: E,
    inputs: &[Tensor<T>],
    eps: f64,
    stencil: Stencil,
    analytic: &[Vec<f64>],
) -> Result<GradCheckReport>
where
    T: Scalar,
    E: Fn(&[Tensor<T>]) -> Result<f64>,
{
    let mut samples = Samples::default();
    let mut work = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[k].data()[i];
            let n = stencil.estimate(eps, |h| {
                work[k].data_mut()[i] = T::from_f64(orig.as_f64() + h);
                eval(&work)
            });
            work[k].data_mut()[i] = orig;
            samples.push(&format!("input{k}"), i, a, n?);
        }
    }
    Ok(samples.report())
}

fn analytic_inputs<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

fn forward_only<T, F>(f: &F, vals: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let vars = vals.iter().map(|t| g.constant(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    eval_scalar(&g, out)
}

/// Same-precision check of `∂f/∂x` for a scalar function of one tensor.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}

/// Same-precision check with respect to every input.
pub fn finite_diff_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_inputs(&f, inputs)?;
    numeric_inputs(|v| forward_only(&f, v), inputs, eps, Stencil::Central, &analytic)
}

/// A scalar function of tensors that can be built in any precision.
pub trait GradFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

/// Analytic gradient in `T`, five-point differences in `f64`.
pub fn check_inputs<T: Scalar, F: GradFn>(f: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport> {
    let typed: Vec<Tensor<T>> = inputs.iter().map(Tensor::cast).collect();
    let analytic = analytic_inputs(&|g: &mut Graph<T>, v: &[Var]| f.eval(g, v), &typed)?;
    // numeric reference on exactly the values the analytic pass saw
    let promoted: Vec<Tensor<f64>> = typed.iter().map(Tensor::cast).collect();
    numeric_inputs(
        |v| forward_only(&|g: &mut Graph<f64>, vs: &[Var]| f.eval(g, vs), v),
        &promoted,
        eps,
        Stencil::FivePoint,
        &analytic,
    )
}

/// A module plus a scalar loss on it, buildable in any precision.
pub trait GradProbe {
    type Model<T: Scalar>: Module<T>;

    fn build<T: Scalar>(&self) -> Result<Self::Model<T>>;

    fn loss<T: Scalar>(&self, model: &Self::Model<T>, g: &mut Graph<T>) -> Result<Var>;
}

/// Checks the gradient of a probe's loss with respect to every trainable
/// parameter. `stride > 1` samples every `stride`-th coordinate of each
/// parameter to bound runtime.
pub fn check_params<T: Scalar, P: GradProbe>(probe: &P, eps: f64, stride: usize) -> Result<GradCheckReport> {
    let model: P::Model<T> = probe.build()?;
    let mut g = Graph::new();
    let out = probe.loss(&model, &mut g)?;
    g.backward(out)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit(&mut |p| {
        if p.is_trainable() {
            let grad = g
                .param_grad(&p.name)
                .map(|gr| gr.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            analytic.push((p.name.clone(), grad));
        }
    });

    // f64 twin carrying the exact same parameter values
    let mut twin: P::Model<f64> = probe.build()?;
    let mut values = std::collections::HashMap::new();
    model.visit(&mut |p| {
        values.insert(p.name.clone(), p.value.cast::<f64>());
    });
    let mut missing = None;
    twin.visit_mut(&mut |p| match values.get(&p.name) {
        Some(v) => p.value.data_mut().copy_from_slice(v.data()),
        None => missing = Some(p.name.clone()),
    });
    if let Some(name) = missing {
        return Err(Error::InvalidArgument(format!("probe twin has extra parameter {name}")));
    }

    let eval = |m: &P::Model<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let out = probe.loss(m, &mut g)?;
        eval_scalar(&g, out)
    };
    let set = |m: &mut P::Model<f64>, name: &str, i: usize, v: f64| {
        m.visit_mut(&mut |p| {
            if p.name == name {
                p.value.data_mut()[i] = v;
            }
        });
    };

    let mut samples = Samples::default();
    for (name, grads) in &analytic {
        let orig_vals = values[name].data().to_vec();
        for (i, &a) in grads.iter().enumerate().step_by(stride.max(1)) {
            let orig = orig_vals[i];
            let n = Stencil::FivePoint.estimate(eps, |h| {
                set(&mut twin, name, i, orig + h);
                eval(&twin)
            });
            set(&mut twin, name, i, orig);
            samples.push(name, i, a, n?);
        }
    }
    Ok(samples.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_64bit() {
        let x = Tensor::<f64>::from_f64(vec![4], &[0.3, -1.2, 2.5, 0.7]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let s = g.square(x)?;
                g.sum(s)
            },
            &x,
            default_eps::<f64>(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coords_checked, 4);
    }

    #[test]
    fn detects_a_cut_gradient_path() {
        let x = Tensor::<f64>::from_f64(vec![2], &[0.5, 1.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                // the value depends on x through a constant copy the tape
                // cannot see
                let copy = g.constant(&g.tensor(x))?;
                let s = g.square(copy)?;
                let s = g.sum(s)?;
                let z = g.scale(x, 0.0)?;
                let z = g.sum(z)?;
                g.add(s, z)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    struct SoftmaxXent;

    impl GradFn for SoftmaxXent {
        fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
            g.cross_entropy(v[0], &[Some(1), None, Some(3)])
        }
    }

    #[test]
    fn promoted_oracle_at_32bit() {
        let vals: Vec<f64> = (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.4).collect();
        let x = Tensor::from_f64(vec![3, 5], &vals).unwrap();
        let r = check_inputs::<f32, _>(&SoftmaxXent, &[x], ORACLE_EPS).unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
