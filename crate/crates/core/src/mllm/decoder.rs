use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mllm::config::EmmaConfig;
use crate::mllm::vision::unpatchify;
use crate::nn::{Init, Linear, Module, Param, RmsNorm};
use crate::ssm::MambaLayer;
use crate::tensor::Scalar;

/// What the decoder reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderTarget {
    /// Sigmoid-squashed pixels, un-patchified to `C×H×W`.
    Pixels,
    /// Raw encoder features, `K × d_vision`.
    Features,
}

/// Mamba layers, a norm, and a per-token linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDecoder<T> {
    pub cfg: EmmaConfig,
    pub target: DecoderTarget,
    pub layers: Vec<MambaLayer<T>>,
    pub norm: RmsNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> ImageDecoder<T> {
    pub fn new(init: &mut Init, cfg: &EmmaConfig) -> Self {
        let (target, d_out) = if cfg.align_visual_features {
            (DecoderTarget::Features, cfg.d_vision)
        } else {
            (DecoderTarget::Pixels, cfg.patch_dim())
        };
        Self {
            cfg: cfg.clone(),
            target,
            layers: (0..cfg.decoder_layers)
                .map(|i| MambaLayer::new(init, &format!("decoder.layers.{i}"), cfg.mamba(cfg.d_model)))
                .collect(),
            norm: RmsNorm::new("decoder.norm", cfg.d_model),
            head: Linear::new(init, "decoder.head", cfg.d_model, d_out, true),
        }
    }

    /// `X̄_v[K × d_model]` → image `C×H×W` (or features `K × d_vision`).
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let want = [self.cfg.num_patches(), self.cfg.d_model];
        if g.shape(x) != want {
            return Err(Error::shape(
                "decode_image",
                format!("expected {want:?}, got {:?}", g.shape(x)),
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        let h = self.norm.forward(g, h)?;
        let out = self.head.forward(g, h)?;
        match self.target {
            DecoderTarget::Features => Ok(out),
            DecoderTarget::Pixels => {
                let px = g.sigmoid(out)?;
                unpatchify(g, &self.cfg, px)
            }
        }
    }
}

impl<T: Scalar> Module<T> for ImageDecoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
        self.norm.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
        self.norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}
