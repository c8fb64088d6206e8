//! Time-invariant diagonal SSMs: discretisation, recurrent evaluation and
//! the equivalent causal convolution.
//!
//! These are verification paths. Training and inference always use the
//! selective scan; the convolution exists to check the recurrence.

use crate::error::{Error, Result};
use crate::ssm::scan::zoh;
use crate::tensor::Scalar;

/// Continuous single-channel system `h' = A h + B x`, `y = C h` with
/// diagonal `A` and step size `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiSystem<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub delta: T,
}

/// Zero-order-hold discretisation: `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)ΔB`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteLti<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

impl<T: Scalar> LtiSystem<T> {
    pub fn new(a: Vec<T>, b: Vec<T>, c: Vec<T>, delta: T) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::InvalidArgument("state dimension must be >= 1".into()));
        }
        if b.len() != a.len() || c.len() != a.len() {
            return Err(Error::shape(
                "lti",
                format!("A has {} entries, B {}, C {}", a.len(), b.len(), c.len()),
            ));
        }
        Ok(Self { a, b, c, delta })
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }
}

pub fn discretize<T: Scalar>(sys: &LtiSystem<T>) -> Result<DiscreteLti<T>> {
    if sys.delta.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {}",
            sys.delta
        )));
    }
    let (a_bar, b_bar) = sys
        .a
        .iter()
        .zip(&sys.b)
        .map(|(&a, &b)| {
            let (abar, phi) = zoh(sys.delta, a);
            (abar, phi * b)
        })
        .unzip();
    Ok(DiscreteLti { a_bar, b_bar })
}

/// Runs `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = C h_t`. Returns `(y, h_L)`.
pub fn scan_recurrent<T: Scalar>(d: &DiscreteLti<T>, c: &[T], x: &[T], h0: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let n = d.a_bar.len();
    if x.is_empty() {
        return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
    }
    if c.len() != n || h0.len() != n || d.b_bar.len() != n {
        return Err(Error::shape("scan_recurrent", format!("state dim {n}")));
    }
    let mut h = h0.to_vec();
    let y = x
        .iter()
        .map(|&xt| {
            let mut acc = T::zero();
            for i in 0..n {
                h[i] = d.a_bar[i] * h[i] + d.b_bar[i] * xt;
                acc += c[i] * h[i];
            }
            acc
        })
        .collect();
    Ok((y, h))
}

/// `K̄[k] = C Āᵏ B̄` for `k < len`.
pub fn conv_kernel<T: Scalar>(d: &DiscreteLti<T>, c: &[T], len: usize) -> Result<Vec<T>> {
    if len == 0 {
        return Err(Error::InvalidArgument("kernel length must be >= 1".into()));
    }
    if c.len() != d.a_bar.len() {
        return Err(Error::shape("conv_kernel", "C does not match state dim"));
    }
    // running Āᵏ B̄ per diagonal entry
    let mut p = d.b_bar.clone();
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        k.push(c.iter().zip(&p).map(|(&ci, &pi)| ci * pi).sum());
        p.iter_mut().zip(&d.a_bar).for_each(|(pi, &ai)| *pi *= ai);
    }
    Ok(k)
}

/// Causal convolution `y_t = Σ_{k≤t} K̄[k]·x_{t−k}`; kernel taps beyond
/// its length count as zero.
pub fn apply_conv<T: Scalar>(kernel: &[T], x: &[T]) -> Vec<T> {
    (0..x.len())
        .map(|t| {
            (0..=t)
                .take_while(|&k| k < kernel.len())
                .map(|k| kernel[k] * x[t - k])
                .sum()
        })
        .collect()
}
