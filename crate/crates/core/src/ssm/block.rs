//! Mamba (v1) and Mamba2-style (v2) mixer blocks.
//!
//! Both versions share the path
//! `in_proj → causal depthwise conv → SiLU → selective scan → SiLU(z) gate → out_proj`.
//! They differ where (Δ, B, C) are produced: v1 projects them from the
//! post-conv activations, v2 from the block input before the conv/SSM path.
//! v2 also normalises the gated scan output before `out_proj`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, inverse_softplus};
use crate::nn::{Init, Linear, Module, Param, RmsNorm};
use crate::ssm::scan;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MambaVersion {
    V1,
    #[default]
    V2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
    pub version: MambaVersion,
}

impl MambaConfig {
    pub fn new(d_model: usize, version: MambaVersion) -> Self {
        Self {
            d_model,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            dt_rank: d_model.div_ceil(16),
            version,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }
}

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlock<T> {
    pub cfg: MambaConfig,
    pub in_proj: Linear<T>,
    pub conv_weight: Param<T>,
    pub conv_bias: Param<T>,
    pub x_proj: Linear<T>,
    pub dt_proj: Linear<T>,
    pub a_log: Param<T>,
    pub d: Param<T>,
    pub norm: Option<RmsNorm<T>>,
    pub out_proj: Linear<T>,
}

/// Per-block decoding cache: the last `d_conv` conv inputs (oldest first)
/// and the SSM state `h` (`d_inner × d_state`).
#[derive(Clone, Debug, PartialEq)]
pub struct MambaCache<T> {
    pub conv_window: Vec<T>,
    pub h: Vec<T>,
}

impl<T: Scalar> MambaCache<T> {
    pub fn new(cfg: &MambaConfig) -> Self {
        Self {
            conv_window: vec![T::zero(); cfg.d_conv * cfg.d_inner()],
            h: vec![T::zero(); cfg.d_inner() * cfg.d_state],
        }
    }
}

impl<T: Scalar> MambaBlock<T> {
    pub fn new(init: &mut Init, name: &str, cfg: MambaConfig) -> Self {
        let (dm, di, n, r) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.dt_rank);
        let conv_bound = 1.0 / (cfg.d_conv as f64).sqrt();
        let proj_in = match cfg.version {
            MambaVersion::V1 => di,
            MambaVersion::V2 => dm,
        };
        let mut dt_proj = Linear::new(init, &format!("{name}.dt_proj"), r, di, true);
        dt_proj.weight.value = init.uniform(vec![r, di], 1.0 / (r as f64).sqrt());
        let dt_bias: Vec<f64> = (0..di)
            .map(|_| inverse_softplus(init.log_uniform(DT_MIN, DT_MAX)))
            .collect();
        dt_proj.bias.as_mut().expect("dt_proj has bias").value = Tensor::from_f64(vec![di], &dt_bias)
            .expect("shape")
            .with_requires_grad(true);
        let a_log: Vec<f64> = (0..di).flat_map(|_| (1..=n).map(|k| (k as f64).ln())).collect();
        Self {
            cfg,
            in_proj: Linear::new(init, &format!("{name}.in_proj"), dm, 2 * di, false),
            conv_weight: Param::new(
                format!("{name}.conv.weight"),
                init.uniform(vec![di, cfg.d_conv], conv_bound),
                true,
            ),
            conv_bias: Param::new(format!("{name}.conv.bias"), init.uniform(vec![di], conv_bound), false),
            x_proj: Linear::new(init, &format!("{name}.x_proj"), proj_in, r + 2 * n, false),
            dt_proj,
            a_log: Param::new(
                format!("{name}.a_log"),
                Tensor::from_f64(vec![di, n], &a_log).expect("shape"),
                false,
            ),
            d: Param::new(format!("{name}.d"), Tensor::full(vec![di], T::one()), false),
            norm: (cfg.version == MambaVersion::V2).then(|| RmsNorm::new(&format!("{name}.norm"), di)),
            out_proj: Linear::new(init, &format!("{name}.out_proj"), di, dm, false),
        }
    }

    /// Full-sequence forward: `x[L×d_model] → [L×d_model]`. The residual is
    /// the caller's.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let (di, n, r) = (cfg.d_inner(), cfg.d_state, cfg.dt_rank);
        if g.shape(x).len() != 2 || g.shape(x)[1] != cfg.d_model {
            return Err(Error::shape(
                "mamba_block",
                format!("input {:?}, d_model {}", g.shape(x), cfg.d_model),
            ));
        }
        let xz = self.in_proj.forward(g, x)?;
        let xi = g.slice_cols(xz, 0, di)?;
        let z = g.slice_cols(xz, di, 2 * di)?;
        let (cw, cb) = (self.conv_weight.var(g)?, self.conv_bias.var(g)?);
        let xc = g.causal_conv(xi, cw, cb)?;
        let xc = g.silu(xc)?;

        let src = match cfg.version {
            MambaVersion::V1 => xc,
            MambaVersion::V2 => x,
        };
        let dbc = self.x_proj.forward(g, src)?;
        let dt_raw = g.slice_cols(dbc, 0, r)?;
        let b = g.slice_cols(dbc, r, r + n)?;
        let c = g.slice_cols(dbc, r + n, r + 2 * n)?;
        let dt = self.dt_proj.forward(g, dt_raw)?;
        let delta = g.softplus(dt)?;

        let a_log = self.a_log.var(g)?;
        let a = g.exp(a_log)?;
        let a = g.neg(a)?;
        let d = self.d.var(g)?;
        let (y, _) = g.selective_scan(xc, delta, a, b, c, d, None)?;

        let gate = g.silu(z)?;
        let mut y = g.mul(y, gate)?;
        if let Some(norm) = &self.norm {
            y = norm.forward(g, y)?;
        }
        self.out_proj.forward(g, y)
    }

    /// One-token forward using and updating `cache`.
    pub fn step(&self, x: &[T], cache: &mut MambaCache<T>) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let (di, n, r, k) = (cfg.d_inner(), cfg.d_state, cfg.dt_rank, cfg.d_conv);
        if x.len() != cfg.d_model {
            return Err(Error::shape(
                "mamba_step",
                format!("input {} vs d_model {}", x.len(), cfg.d_model),
            ));
        }
        let xz = self.in_proj.apply(x);
        let (xi, z) = xz.split_at(di);

        cache.conv_window.copy_within(di.., 0);
        cache.conv_window[(k - 1) * di..].copy_from_slice(xi);
        let (w, cb) = (self.conv_weight.data(), self.conv_bias.data());
        let xc: Vec<T> = (0..di)
            .map(|ch| {
                let mut s = cb[ch];
                for j in 0..k {
                    s += w[ch * k + j] * cache.conv_window[j * di + ch];
                }
                kernels::silu(s)
            })
            .collect();

        let src = match cfg.version {
            MambaVersion::V1 => &xc[..],
            MambaVersion::V2 => x,
        };
        let dbc = self.x_proj.apply(src);
        let delta: Vec<T> = self
            .dt_proj
            .apply(&dbc[..r])
            .into_iter()
            .map(kernels::softplus)
            .collect();
        let a: Vec<T> = self.a_log.data().iter().map(|&v| -v.exp()).collect();
        let mut y = scan::step(
            &mut cache.h,
            &xc,
            &delta,
            &a,
            &dbc[r..r + n],
            &dbc[r + n..r + 2 * n],
            self.d.data(),
        )?;
        y.iter_mut().zip(z).for_each(|(v, &zv)| *v *= kernels::silu(zv));
        if let Some(norm) = &self.norm {
            y = norm.apply(&y);
        }
        Ok(self.out_proj.apply(&y))
    }
}

impl<T: Scalar> Module<T> for MambaBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.in_proj.visit(f);
        f(&self.conv_weight);
        f(&self.conv_bias);
        self.x_proj.visit(f);
        self.dt_proj.visit(f);
        f(&self.a_log);
        f(&self.d);
        if let Some(n) = &self.norm {
            n.visit(f);
        }
        self.out_proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.in_proj.visit_mut(f);
        f(&mut self.conv_weight);
        f(&mut self.conv_bias);
        self.x_proj.visit_mut(f);
        self.dt_proj.visit_mut(f);
        f(&mut self.a_log);
        f(&mut self.d);
        if let Some(n) = &mut self.norm {
            n.visit_mut(f);
        }
        self.out_proj.visit_mut(f);
    }
}

/// Pre-norm residual wrapper: `x + mixer(norm(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaLayer<T> {
    pub norm: RmsNorm<T>,
    pub mixer: MambaBlock<T>,
}

impl<T: Scalar> MambaLayer<T> {
    pub fn new(init: &mut Init, name: &str, cfg: MambaConfig) -> Self {
        Self {
            norm: RmsNorm::new(&format!("{name}.norm"), cfg.d_model),
            mixer: MambaBlock::new(init, &format!("{name}.mixer"), cfg),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.mixer.forward(g, h)?;
        g.add(x, h)
    }

    pub fn step(&self, x: &[T], cache: &mut MambaCache<T>) -> Result<Vec<T>> {
        let h = self.mixer.step(&self.norm.apply(x), cache)?;
        Ok(x.iter().zip(h).map(|(&a, b)| a + b).collect())
    }
}

impl<T: Scalar> Module<T> for MambaLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.norm.visit(f);
        self.mixer.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.norm.visit_mut(f);
        self.mixer.visit_mut(f);
    }
}
