//! Input-dependent (selective) diagonal SSM scan.
//!
//! For every position `t`, channel `d` and state index `n`:
//!
//! ```text
//! Ā = exp(δ[t,d]·A[d,n])
//! B̄ = (exp(δA) − 1)/A · B[t,n]          (zero-order hold, per diagonal entry)
//! h[t,d,n] = Ā·h[t−1,d,n] + B̄·x[t,d]
//! y[t,d] = Σₙ C[t,n]·h[t,d,n] + D[d]·x[t,d]
//! ```
//!
//! The forward pass keeps every state so the backward pass can run the
//! recurrence in reverse without recomputation.

use crate::error::{Error, Result};
use crate::tensor::{c, Scalar};

/// `|δA|` below which the B̄ factor uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Zero-order-hold factors for one diagonal entry: `(Ā, φ)` with `B̄ = φ·B`.
#[inline]
pub fn zoh<T: Scalar>(delta: T, a: T) -> (T, T) {
    let z = delta * a;
    let abar = z.exp();
    let phi = if z.abs() < c(SERIES_THRESHOLD) {
        delta * (T::one() + z / c(2.0) + z * z / c(6.0))
    } else {
        z.exp_m1() / a
    };
    (abar, phi)
}

/// `∂φ/∂a` for [`zoh`]; `∂φ/∂δ` is simply `Ā`.
#[inline]
fn dphi_da<T: Scalar>(delta: T, a: T, abar: T, phi: T) -> T {
    let z = delta * a;
    if z.abs() < c(SERIES_THRESHOLD) {
        delta * delta * (c::<T>(0.5) + z / c(3.0))
    } else {
        (delta * abar - phi) / a
    }
}

pub struct ScanSaved<T> {
    dims: ScanDims,
    h0: Vec<T>,
    /// `L × D × N` states after each position.
    states: Vec<T>,
}

impl<T: Scalar> ScanSaved<T> {
    pub fn final_state(&self) -> &[T] {
        let sz = self.dims.channels * self.dims.state;
        &self.states[(self.dims.len - 1) * sz..]
    }
}

pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

fn check_delta<T: Scalar>(delta: &[T]) -> Result<()> {
    match delta
        .iter()
        .find(|v| v.partial_cmp(&&T::zero()) != Some(std::cmp::Ordering::Greater))
    {
        Some(bad) => Err(Error::InvalidArgument(format!("step size must be positive, got {bad}"))),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn forward<T: Scalar>(
    dims: ScanDims,
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    cm: &[T],
    d: &[T],
    h0: Option<&[T]>,
) -> Result<(Vec<T>, ScanSaved<T>)> {
    let ScanDims { len, channels, state } = dims;
    if len == 0 {
        return Err(Error::shape("selective_scan", "empty sequence"));
    }
    check_delta(delta)?;
    let sz = channels * state;
    let h0 = h0.map_or_else(|| vec![T::zero(); sz], <[T]>::to_vec);
    let mut states = vec![T::zero(); len * sz];
    let mut y = vec![T::zero(); len * channels];
    for t in 0..len {
        let (done, rest) = states.split_at_mut(t * sz);
        let prev = if t == 0 { &h0[..] } else { &done[(t - 1) * sz..] };
        let cur = &mut rest[..sz];
        let bt = &b[t * state..(t + 1) * state];
        let ct = &cm[t * state..(t + 1) * state];
        for ch in 0..channels {
            let xt = x[t * channels + ch];
            let dt = delta[t * channels + ch];
            let mut acc = d[ch] * xt;
            for n in 0..state {
                let i = ch * state + n;
                let (abar, phi) = zoh(dt, a[i]);
                let h = abar * prev[i] + phi * bt[n] * xt;
                cur[i] = h;
                acc += ct[n] * h;
            }
            y[t * channels + ch] = acc;
        }
    }
    Ok((y, ScanSaved { dims, h0, states }))
}

#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    saved: &ScanSaved<T>,
    dy: &[T],
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    cm: &[T],
    d: &[T],
) -> ScanGrads<T> {
    let ScanDims { len, channels, state } = saved.dims;
    let sz = channels * state;
    let mut g = ScanGrads {
        x: vec![T::zero(); len * channels],
        delta: vec![T::zero(); len * channels],
        a: vec![T::zero(); sz],
        b: vec![T::zero(); len * state],
        c: vec![T::zero(); len * state],
        d: vec![T::zero(); channels],
    };
    // gradient flowing into h[t] from the future
    let mut gh = vec![T::zero(); sz];
    for t in (0..len).rev() {
        let cur = &saved.states[t * sz..(t + 1) * sz];
        let prev = if t == 0 {
            &saved.h0[..]
        } else {
            &saved.states[(t - 1) * sz..t * sz]
        };
        let bt = &b[t * state..(t + 1) * state];
        let ct = &cm[t * state..(t + 1) * state];
        for ch in 0..channels {
            let gy = dy[t * channels + ch];
            let xt = x[t * channels + ch];
            let dt = delta[t * channels + ch];
            g.d[ch] += gy * xt;
            let mut gx = gy * d[ch];
            let mut gdelta = T::zero();
            for n in 0..state {
                let i = ch * state + n;
                let h = cur[i];
                g.c[t * state + n] += gy * h;
                let ghi = gh[i] + gy * ct[n];
                let (abar, phi) = zoh(dt, a[i]);
                let g_abar = ghi * prev[i];
                let g_phi = ghi * bt[n] * xt;
                g.b[t * state + n] += ghi * phi * xt;
                gx += ghi * phi * bt[n];
                gdelta += g_abar * a[i] * abar + g_phi * abar;
                g.a[i] += g_abar * dt * abar + g_phi * dphi_da(dt, a[i], abar, phi);
                gh[i] = ghi * abar;
            }
            g.x[t * channels + ch] += gx;
            g.delta[t * channels + ch] += gdelta;
        }
    }
    g
}

/// One recurrence step for incremental decoding. Updates `h` (`D × N`) in
/// place and returns `y_t` (`D`).
pub fn step<T: Scalar>(h: &mut [T], x: &[T], delta: &[T], a: &[T], b: &[T], cm: &[T], d: &[T]) -> Result<Vec<T>> {
    let (channels, state) = (x.len(), b.len());
    if h.len() != channels * state || delta.len() != channels || a.len() != channels * state {
        return Err(Error::shape("selective_scan_step", "state/input sizes disagree"));
    }
    check_delta(delta)?;
    let mut y = vec![T::zero(); channels];
    for ch in 0..channels {
        let mut acc = d[ch] * x[ch];
        for n in 0..state {
            let i = ch * state + n;
            let (abar, phi) = zoh(delta[ch], a[i]);
            h[i] = abar * h[i] + phi * b[n] * x[ch];
            acc += cm[n] * h[i];
        }
        y[ch] = acc;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoh_limits() {
        let (abar, phi) = zoh(1.0f64, -1.0);
        assert!((abar - (-1f64).exp()).abs() < 1e-15);
        assert!((phi - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert_eq!(zoh(0.3f64, 0.0), (1.0, 0.3));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let dims = ScanDims {
            len: 5,
            channels: 3,
            state: 2,
        };
        let x = vec![0.0f64; 15];
        let delta = vec![0.1; 15];
        let a = vec![-1.0; 6];
        let b = vec![0.7; 10];
        let cm = vec![-0.3; 10];
        let d = vec![2.5; 3];
        let (y, _) = forward(dims, &x, &delta, &a, &b, &cm, &d, None).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nonpositive_delta_rejected() {
        let dims = ScanDims {
            len: 1,
            channels: 1,
            state: 1,
        };
        let r = forward(dims, &[1.0f64], &[0.0], &[-1.0], &[1.0], &[1.0], &[0.0], None);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn step_matches_forward() {
        let dims = ScanDims {
            len: 6,
            channels: 2,
            state: 3,
        };
        let f = |i: usize, s: f64| ((i as f64 + 1.0) * s).sin();
        let x: Vec<f64> = (0..12).map(|i| f(i, 0.7)).collect();
        let delta: Vec<f64> = (0..12).map(|i| 0.05 + 0.1 * f(i, 1.3).abs()).collect();
        let a: Vec<f64> = (0..6).map(|i| -(1.0 + i as f64)).collect();
        let b: Vec<f64> = (0..18).map(|i| f(i, 0.4)).collect();
        let cm: Vec<f64> = (0..18).map(|i| f(i, 2.1)).collect();
        let d = vec![0.5, -0.25];
        let (y, saved) = forward(dims, &x, &delta, &a, &b, &cm, &d, None).unwrap();
        let mut h = vec![0.0; 6];
        for t in 0..6 {
            let yt = step(
                &mut h,
                &x[t * 2..t * 2 + 2],
                &delta[t * 2..t * 2 + 2],
                &a,
                &b[t * 3..t * 3 + 3],
                &cm[t * 3..t * 3 + 3],
                &d,
            )
            .unwrap();
            assert_eq!(yt, y[t * 2..t * 2 + 2]);
        }
        assert_eq!(h, saved.final_state());
    }
}
