use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::mllm::config::EmmaConfig;
use crate::nn::{Init, Module, Param, RmsNorm};
use crate::ssm::{MambaCache, MambaLayer};
use crate::tensor::{Scalar, Tensor};

pub const EMBED_STD: f64 = 0.02;

/// Mamba language model with a token embedding tied to the output head.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel<T> {
    pub embed: Param<T>,
    pub layers: Vec<MambaLayer<T>>,
    pub norm: RmsNorm<T>,
}

/// Residual streams kept for fusion plus the logits over every position.
#[derive(Clone, Debug)]
pub struct LlmOutput {
    /// `streams[i]` is the residual stream after `depths[i]` blocks.
    pub streams: Vec<Var>,
    pub logits: Var,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn new(init: &mut Init, cfg: &EmmaConfig) -> Self {
        Self {
            embed: Param::new(
                "llm.embed",
                init.normal(vec![cfg.vocab_size, cfg.d_model], EMBED_STD),
                true,
            ),
            layers: (0..cfg.n_layers)
                .map(|i| MambaLayer::new(init, &format!("llm.layers.{i}"), cfg.mamba(cfg.d_model)))
                .collect(),
            norm: RmsNorm::new("llm.norm", cfg.d_model),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.value.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.embed.value.shape()[1]
    }

    pub fn embed_tokens(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<Var> {
        let table = self.embed.var(g)?;
        g.embedding(table, ids)
    }

    /// Runs the stack over `x[S × d_model]`, keeping the residual stream at
    /// each of `depths` (0 = input, `n_layers` = before the final norm).
    pub fn forward(&self, g: &mut Graph<T>, x: Var, depths: &[usize]) -> Result<LlmOutput> {
        if let Some(&d) = depths.iter().find(|&&d| d > self.layers.len()) {
            return Err(Error::InvalidArgument(format!(
                "depth {d} exceeds {} layers",
                self.layers.len()
            )));
        }
        let mut streams = vec![None; depths.len()];
        let mut keep = |depth: usize, h: Var| {
            for (slot, _) in streams.iter_mut().zip(depths).filter(|(_, &d)| d == depth) {
                *slot = Some(h);
            }
        };
        let mut h = x;
        keep(0, h);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            keep(i + 1, h);
        }
        let h = self.norm.forward(g, h)?;
        let table = self.embed.var(g)?;
        let head = g.transpose(table)?;
        let logits = g.matmul(h, head)?;
        Ok(LlmOutput {
            streams: streams.into_iter().map(|s| s.expect("every depth visited")).collect(),
            logits,
        })
    }

    pub fn new_caches(&self) -> Vec<MambaCache<T>> {
        self.layers.iter().map(|l| MambaCache::new(&l.mixer.cfg)).collect()
    }

    pub fn token_embedding(&self, id: usize) -> Result<&[T]> {
        let d = self.d_model();
        if id >= self.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "token id {id} out of vocabulary {}",
                self.vocab_size()
            )));
        }
        Ok(&self.embed.data()[id * d..(id + 1) * d])
    }

    /// One position through every layer; returns the logits.
    pub fn step(&self, x: &[T], caches: &mut [MambaCache<T>]) -> Result<Vec<T>> {
        let mut h = x.to_vec();
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            h = layer.step(&h, cache)?;
        }
        let h = self.norm.apply(&h);
        let (v, d) = (self.vocab_size(), self.d_model());
        let mut logits = vec![T::zero(); v];
        kernels::gemm_a_bt(&h, self.embed.data(), &mut logits, 1, d, v);
        Ok(logits)
    }

    /// Logits for a full embedded sequence, without keeping any graph.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let x = g.constant(x)?;
        let out = self.forward(&mut g, x, &[])?;
        Ok(g.tensor(out.logits))
    }
}

impl<T: Scalar> Module<T> for LanguageModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.embed);
        self.layers.iter().for_each(|l| l.visit(f));
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.embed);
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
        self.norm.visit_mut(f);
    }
}
