use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mllm::tokenizer::VOCAB_SIZE;
use crate::ssm::{MambaConfig, MambaVersion};

/// Model hyperparameters. Serialised as the `[model]` table of a config
/// file and echoed into checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmmaConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Width of the frozen vision stub's output features.
    pub d_vision: usize,
    pub vision_layers: usize,
    /// Seed of the frozen vision stub. Independent of the training seed so
    /// every model sees the same features.
    pub vision_seed: u64,
    pub d_model: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    /// Residual-stream depths fed to the fusion chain: index `i` is the
    /// stream after `i` LLM blocks. The final stream is always appended.
    pub fusion_layer_indices: Vec<usize>,
    pub fusion_heads: usize,
    pub decoder_layers: usize,
    pub lambda_pixel: f64,
    pub use_mff: bool,
    pub use_pal: bool,
    pub align_visual_features: bool,
    pub mamba_version: MambaVersion,
}

/// `⌈n/4⌉, ⌈n/2⌉, ⌈3n/4⌉`.
pub fn default_fusion_indices(n_layers: usize) -> Vec<usize> {
    vec![n_layers.div_ceil(4), n_layers.div_ceil(2), (3 * n_layers).div_ceil(4)]
}

impl Default for EmmaConfig {
    fn default() -> Self {
        let n_layers = 4;
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            d_vision: 32,
            vision_layers: 2,
            vision_seed: 0x5eed_f00d,
            d_model: 64,
            n_layers,
            vocab_size: VOCAB_SIZE,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            fusion_layer_indices: default_fusion_indices(n_layers),
            fusion_heads: 1,
            decoder_layers: 4,
            lambda_pixel: 1.0,
            use_mff: true,
            use_pal: true,
            align_visual_features: false,
            mamba_version: MambaVersion::V2,
        }
    }
}

impl EmmaConfig {
    /// A small configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            d_vision: 8,
            vision_layers: 1,
            d_model: 8,
            n_layers: 4,
            d_state: 4,
            decoder_layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("d_vision", self.d_vision),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("d_conv", self.d_conv),
            ("fusion_heads", self.fusion_heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab_size < VOCAB_SIZE {
            return bad(format!("vocab_size must be at least {VOCAB_SIZE}"));
        }
        let idx = &self.fusion_layer_indices;
        if idx.len() != 3 {
            return bad(format!("need exactly 3 fusion layer indices, got {}", idx.len()));
        }
        if idx.windows(2).any(|w| w[0] >= w[1]) || idx[2] >= self.n_layers {
            return bad(format!(
                "fusion layer indices {idx:?} must be strictly increasing and below n_layers {}",
                self.n_layers
            ));
        }
        if !self.d_model.is_multiple_of(self.fusion_heads) {
            return bad(format!(
                "d_model {} not divisible by fusion_heads {}",
                self.d_model, self.fusion_heads
            ));
        }
        if !(self.lambda_pixel >= 0.0 && self.lambda_pixel.is_finite()) {
            return bad(format!(
                "lambda_pixel must be finite and nonnegative, got {}",
                self.lambda_pixel
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of visual tokens `K`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn mamba(&self, d_model: usize) -> MambaConfig {
        MambaConfig {
            d_state: self.d_state,
            expand: self.expand,
            d_conv: self.d_conv,
            ..MambaConfig::new(d_model, self.mamba_version)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = EmmaConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.fusion_layer_indices, vec![1, 2, 3]);
        assert_eq!(default_fusion_indices(8), vec![2, 4, 6]);
        EmmaConfig::tiny().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = EmmaConfig {
            use_mff: false,
            mamba_version: MambaVersion::V1,
            ..EmmaConfig::default()
        };
        assert_eq!(EmmaConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = EmmaConfig {
            patch_size: 5,
            ..EmmaConfig::default()
        };
        assert!(c.validate().is_err());
        c.patch_size = 4;
        c.fusion_layer_indices = vec![1, 1, 3];
        assert!(c.validate().is_err());
        c.fusion_layer_indices = vec![1, 2, 4];
        assert!(c.validate().is_err());
        assert!(EmmaConfig::from_toml("bogus = 1").is_err());
    }
}
