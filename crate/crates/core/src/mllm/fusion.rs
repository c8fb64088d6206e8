//! Multi-scale feature fusion: a left-nested chain of fusion blocks, each
//! a residual cross-attention followed by a residual Mamba layer.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mllm::config::EmmaConfig;
use crate::nn::{Init, Linear, Module, Param, RmsNorm};
use crate::ssm::MambaLayer;
use crate::tensor::{c, Scalar};

/// Non-causal multi-head attention with queries from `x` and keys/values
/// from `y`. Both inputs are RMS-normalised first; projections have no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention<T> {
    pub heads: usize,
    pub q_norm: RmsNorm<T>,
    pub kv_norm: RmsNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

impl<T: Scalar> CrossAttention<T> {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self {
            heads,
            q_norm: RmsNorm::new(&format!("{name}.q_norm"), d),
            kv_norm: RmsNorm::new(&format!("{name}.kv_norm"), d),
            q: Linear::new(init, &format!("{name}.q"), d, d, false),
            k: Linear::new(init, &format!("{name}.k"), d, d, false),
            v: Linear::new(init, &format!("{name}.v"), d, d, false),
            o: Linear::new(init, &format!("{name}.o"), d, d, false),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        let xn = self.q_norm.forward(g, x)?;
        let yn = self.kv_norm.forward(g, y)?;
        let q = self.q.forward(g, xn)?;
        let k = self.k.forward(g, yn)?;
        let v = self.v.forward(g, yn)?;
        let d = g.shape(q)[1];
        let dh = d / self.heads;
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, (h + 1) * dh)?,
                    g.slice_cols(k, h * dh, (h + 1) * dh)?,
                    g.slice_cols(v, h * dh, (h + 1) * dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, o)
    }
}

impl<T: Scalar> Module<T> for CrossAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.q_norm.visit(f);
        self.kv_norm.visit(f);
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.o.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.q_norm.visit_mut(f);
        self.kv_norm.visit_mut(f);
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.o.visit_mut(f);
    }
}

/// `B̂ = X + attn(X, Y)`, then `B = B̂ + Mamba(B̂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock<T> {
    pub attn: CrossAttention<T>,
    pub mamba: MambaLayer<T>,
}

impl<T: Scalar> FusionBlock<T> {
    pub fn new(init: &mut Init, name: &str, cfg: &EmmaConfig) -> Self {
        Self {
            attn: CrossAttention::new(init, &format!("{name}.attn"), cfg.d_model, cfg.fusion_heads),
            mamba: MambaLayer::new(init, &format!("{name}.mamba"), cfg.mamba(cfg.d_model)),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        if g.shape(x) != g.shape(y) {
            return Err(Error::shape(
                "fusion_block",
                format!("query {:?} vs key/value {:?}", g.shape(x), g.shape(y)),
            ));
        }
        let a = self.attn.forward(g, x, y)?;
        let b_hat = g.add(x, a)?;
        self.mamba.forward(g, b_hat)
    }

    /// Zeroes the value and both output projections, turning the block into
    /// the identity on its query input.
    pub fn zero_residual_branches(&mut self) {
        for p in [
            &mut self.attn.v.weight,
            &mut self.attn.o.weight,
            &mut self.mamba.mixer.out_proj.weight,
        ] {
            p.value.data_mut().fill(T::zero());
        }
    }
}

impl<T: Scalar> Module<T> for FusionBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.attn.visit(f);
        self.mamba.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.attn.visit_mut(f);
        self.mamba.visit_mut(f);
    }
}

/// `ψ = B₃(B₂(B₁(X̄_i, X̄_j), X̄_k), X̄_final)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFusion<T> {
    pub blocks: Vec<FusionBlock<T>>,
}

impl<T: Scalar> FeatureFusion<T> {
    pub const INPUTS: usize = 4;

    pub fn new(init: &mut Init, cfg: &EmmaConfig) -> Self {
        Self {
            blocks: (0..Self::INPUTS - 1)
                .map(|i| FusionBlock::new(init, &format!("mff.blocks.{i}"), cfg))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, feats: &[Var]) -> Result<Var> {
        if feats.len() != Self::INPUTS {
            return Err(Error::InvalidArgument(format!(
                "feature fusion takes {} inputs, got {}",
                Self::INPUTS,
                feats.len()
            )));
        }
        let mut acc = feats[0];
        for (block, &y) in self.blocks.iter().zip(&feats[1..]) {
            acc = block.forward(g, acc, y)?;
        }
        Ok(acc)
    }
}

impl<T: Scalar> Module<T> for FeatureFusion<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.blocks.iter().for_each(|b| b.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
    }
}
