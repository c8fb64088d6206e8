//! Frozen vision stub and the patch layout shared with the decoder.
//!
//! Patches are ordered row-major over the `grid × grid` patch lattice.
//! Within a patch, values are ordered by pixel row, pixel column, then
//! channel (channel-last). Images are `C × H × W`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mllm::config::EmmaConfig;
use crate::nn::{Init, Linear, Module, Param, RmsNorm};
use crate::ssm::MambaLayer;
use crate::tensor::{Scalar, Tensor};

/// For every flat `C×H×W` image index, the flat `K × p²C` patch index
/// holding the same value.
pub fn patch_index(cfg: &EmmaConfig) -> Vec<usize> {
    let (p, c, s, grid) = (cfg.patch_size, cfg.channels, cfg.image_size, cfg.grid());
    let pd = cfg.patch_dim();
    let mut idx = vec![0; cfg.image_numel()];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let token = (y / p) * grid + x / p;
                idx[(ch * s + y) * s + x] = token * pd + ((y % p) * p + x % p) * c + ch;
            }
        }
    }
    idx
}

pub fn check_image<T: Scalar>(cfg: &EmmaConfig, image: &Tensor<T>) -> Result<()> {
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != want {
        return Err(Error::shape(
            "image",
            format!("expected {want:?}, got {:?}", image.shape()),
        ));
    }
    Ok(())
}

/// `C×H×W` image → `K × p²C` patch matrix.
pub fn patchify<T: Scalar>(cfg: &EmmaConfig, image: &Tensor<T>) -> Result<Tensor<T>> {
    check_image(cfg, image)?;
    let mut out = vec![T::zero(); image.numel()];
    for (src, &dst) in patch_index(cfg).iter().enumerate() {
        out[dst] = image.data()[src];
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// `K × p²C` patch matrix → `C×H×W` image, differentiably.
pub fn unpatchify<T: Scalar>(g: &mut Graph<T>, cfg: &EmmaConfig, patches: Var) -> Result<Var> {
    let want = [cfg.num_patches(), cfg.patch_dim()];
    if g.shape(patches) != want {
        return Err(Error::shape(
            "unpatchify",
            format!("expected {want:?}, got {:?}", g.shape(patches)),
        ));
    }
    let s = cfg.image_size;
    g.gather(patches, patch_index(cfg), vec![cfg.channels, s, s])
}

/// Patch embedding followed by Mamba layers and a norm. Randomly
/// initialised from a fixed seed and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder<T> {
    pub cfg: EmmaConfig,
    pub patch_embed: Linear<T>,
    pub layers: Vec<MambaLayer<T>>,
    pub norm: RmsNorm<T>,
}

impl<T: Scalar> VisionEncoder<T> {
    pub fn new(cfg: &EmmaConfig) -> Self {
        let mut init = Init::new(cfg.vision_seed);
        let mut patch_embed = Linear::new(&mut init, "vision.patch_embed", cfg.patch_dim(), cfg.d_vision, true);
        let bound = 1.0 / (cfg.patch_dim() as f64).sqrt();
        if let Some(b) = patch_embed.bias.as_mut() {
            b.value = init.uniform(vec![cfg.d_vision], bound);
        }
        let layers = (0..cfg.vision_layers)
            .map(|i| MambaLayer::new(&mut init, &format!("vision.layers.{i}"), cfg.mamba(cfg.d_vision)))
            .collect();
        let mut enc = Self {
            cfg: cfg.clone(),
            patch_embed,
            layers,
            norm: RmsNorm::new("vision.norm", cfg.d_vision),
        };
        enc.freeze();
        enc
    }

    /// `X̃_v = f_v(X_v)`, shape `K × d_vision`.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let patches = patchify(&self.cfg, image)?;
        let mut g = Graph::no_grad();
        let x = g.constant(&patches)?;
        let mut h = self.patch_embed.forward(&mut g, x)?;
        for layer in &self.layers {
            h = layer.forward(&mut g, h)?;
        }
        let h = self.norm.forward(&mut g, h)?;
        Ok(g.tensor(h))
    }
}

impl<T: Scalar> Module<T> for VisionEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.patch_embed.visit(f);
        self.layers.iter().for_each(|l| l.visit(f));
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.patch_embed.visit_mut(f);
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
        self.norm.visit_mut(f);
    }
}

/// Three linear layers with GeLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector<T> {
    pub layers: [Linear<T>; 3],
}

impl<T: Scalar> Projector<T> {
    pub fn new(init: &mut Init, d_in: usize, d_model: usize) -> Self {
        Self {
            layers: [
                Linear::new(init, "projector.0", d_in, d_model, true),
                Linear::new(init, "projector.1", d_model, d_model, true),
                Linear::new(init, "projector.2", d_model, d_model, true),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, x)?;
        let h = g.gelu(h)?;
        let h = self.layers[1].forward(g, h)?;
        let h = g.gelu(h)?;
        self.layers[2].forward(g, h)
    }
}

impl<T: Scalar> Module<T> for Projector<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}
