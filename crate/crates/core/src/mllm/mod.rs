//! The multimodal model: frozen vision stub, projector, Mamba LLM,
//! multi-scale feature fusion and the image decoder used for pixel-wise
//! alignment.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod fusion;
pub mod llm;
pub mod model;
pub mod tokenizer;
pub mod vision;

pub use config::EmmaConfig;
pub use decoder::{DecoderTarget, ImageDecoder};
pub use fusion::{CrossAttention, FeatureFusion, FusionBlock};
pub use llm::{LanguageModel, LlmOutput};
pub use model::{pixel_loss, text_loss, EmmaModel, Example, ForwardOutput, LossParts, MultimodalSequence};
pub use vision::{patchify, unpatchify, Projector, VisionEncoder};
