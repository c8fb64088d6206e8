use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mllm::config::EmmaConfig;
use crate::mllm::decoder::{DecoderTarget, ImageDecoder};
use crate::mllm::fusion::FeatureFusion;
use crate::mllm::llm::{LanguageModel, LlmOutput};
use crate::mllm::tokenizer::PAD;
use crate::mllm::vision::{check_image, Projector, VisionEncoder};
use crate::nn::{Init, Module, Param};
use crate::tensor::{Scalar, Tensor};

/// Embedded `[visual; text]` sequence with next-token targets.
#[derive(Clone, Debug)]
pub struct MultimodalSequence {
    pub embeddings: Var,
    /// One entry per position; `None` where no loss applies (visual
    /// positions, the last text position, padding).
    pub targets: Vec<Option<usize>>,
    pub num_visual: usize,
    pub num_text: usize,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.num_visual + self.num_text
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask_sum(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub text: Var,
    /// Absent when pixel alignment is disabled.
    pub pixel: Option<Var>,
    pub total: Var,
}

/// Every intermediate of one training forward.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub seq: MultimodalSequence,
    pub llm: LlmOutput,
    /// Visual-position hidden states at each fusion depth, then the final
    /// depth.
    pub visual_hidden: Vec<Var>,
    pub fused: Option<Var>,
    pub recon: Option<Var>,
    pub losses: LossParts,
}

/// One training example: image in `[0,1]`, its cached encoder features and
/// the token ids `[BOS, caption.., EOS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub image: Tensor<T>,
    pub features: Tensor<T>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmmaModel<T> {
    pub cfg: EmmaConfig,
    pub vision: VisionEncoder<T>,
    pub projector: Projector<T>,
    pub llm: LanguageModel<T>,
    pub mff: Option<FeatureFusion<T>>,
    pub decoder: Option<ImageDecoder<T>>,
}

impl<T: Scalar> EmmaModel<T> {
    /// The fusion chain is built only when `use_mff` is set; the decoder is
    /// always built so `--no-pal` runs keep it at its initial values.
    pub fn new(cfg: &EmmaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let stream = |k: u64| Init::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k));
        Ok(Self {
            cfg: cfg.clone(),
            vision: VisionEncoder::new(cfg),
            projector: Projector::new(&mut stream(1), cfg.d_vision, cfg.d_model),
            llm: LanguageModel::new(&mut stream(2), cfg),
            mff: cfg.use_mff.then(|| FeatureFusion::new(&mut stream(3), cfg)),
            decoder: Some(ImageDecoder::new(&mut stream(4), cfg)),
        })
    }

    /// Drops the fusion chain and decoder, leaving the inference path.
    pub fn strip_alignment_heads(&mut self) {
        self.mff = None;
        self.decoder = None;
    }

    pub fn example(&self, image: Tensor<T>, tokens: Vec<usize>) -> Result<Example<T>> {
        let features = self.encode_image(&image)?;
        Ok(Example {
            image,
            features,
            tokens,
        })
    }

    /// `X̃_v = f_v(X_v)`.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.vision.encode(image)
    }

    pub fn project(&self, g: &mut Graph<T>, features: &Tensor<T>) -> Result<Var> {
        let want = [self.cfg.num_patches(), self.cfg.d_vision];
        if features.shape() != want {
            return Err(Error::shape(
                "project",
                format!("expected features {want:?}, got {:?}", features.shape()),
            ));
        }
        let x = g.constant(features)?;
        self.projector.forward(g, x)
    }

    /// `X̃_LLM = concat(M_proj(X̃_v), embed(X_t))` with targets shifted by
    /// one over the text positions.
    pub fn build_sequence(
        &self,
        g: &mut Graph<T>,
        features: &Tensor<T>,
        tokens: &[usize],
    ) -> Result<MultimodalSequence> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of vocabulary {}",
                self.cfg.vocab_size
            )));
        }
        let visual = self.project(g, features)?;
        let text = self.llm.embed_tokens(g, tokens)?;
        let embeddings = g.concat_rows(&[visual, text])?;
        let k = self.cfg.num_patches();
        let targets = std::iter::repeat_n(None, k)
            .chain((0..tokens.len()).map(|j| tokens.get(j + 1).copied().filter(|&t| t != PAD)))
            .collect();
        Ok(MultimodalSequence {
            embeddings,
            targets,
            num_visual: k,
            num_text: tokens.len(),
        })
    }

    /// Residual-stream depths handed to the fusion chain.
    pub fn fusion_depths(&self) -> Vec<usize> {
        let mut d = self.cfg.fusion_layer_indices.clone();
        d.push(self.cfg.n_layers);
        d
    }

    pub fn llm_forward(&self, g: &mut Graph<T>, seq: &MultimodalSequence) -> Result<(LlmOutput, Vec<Var>)> {
        let out = self.llm.forward(g, seq.embeddings, &self.fusion_depths())?;
        let visual = out
            .streams
            .iter()
            .map(|&s| g.slice_rows(s, 0, seq.num_visual))
            .collect::<Result<Vec<_>>>()?;
        Ok((out, visual))
    }

    /// `X̄_v`: the fused visual states, or the final-layer states without MFF.
    pub fn fuse(&self, g: &mut Graph<T>, visual_hidden: &[Var]) -> Result<Var> {
        if !self.cfg.use_mff {
            return visual_hidden
                .last()
                .copied()
                .ok_or_else(|| Error::InvalidArgument("no hidden states to fuse".into()));
        }
        self.mff
            .as_ref()
            .ok_or(Error::MissingComponent("feature fusion"))?
            .forward(g, visual_hidden)
    }

    pub fn decode_image(&self, g: &mut Graph<T>, fused: Var) -> Result<Var> {
        self.decoder
            .as_ref()
            .ok_or(Error::MissingComponent("image decoder"))?
            .forward(g, fused)
    }

    /// Full training forward: `L = L_text + λ·L_pixel`.
    pub fn forward(&self, g: &mut Graph<T>, ex: &Example<T>) -> Result<ForwardOutput> {
        check_image(&self.cfg, &ex.image)?;
        let seq = self.build_sequence(g, &ex.features, &ex.tokens)?;
        let (llm, visual_hidden) = self.llm_forward(g, &seq)?;
        let text = text_loss(g, llm.logits, &seq.targets)?;
        let (mut fused, mut recon, mut pixel) = (None, None, None);
        if self.cfg.use_pal {
            let f = self.fuse(g, &visual_hidden)?;
            let r = self.decode_image(g, f)?;
            let target = match self.decoder.as_ref().map(|d| d.target) {
                Some(DecoderTarget::Features) => &ex.features,
                _ => &ex.image,
            };
            let target = g.constant(target)?;
            pixel = Some(pixel_loss(g, r, target)?);
            fused = Some(f);
            recon = Some(r);
        }
        let total = match pixel {
            Some(p) => {
                let weighted = g.scale(p, T::from_f64(self.cfg.lambda_pixel))?;
                g.add(text, weighted)?
            }
            None => text,
        };
        Ok(ForwardOutput {
            seq,
            llm,
            visual_hidden,
            fused,
            recon,
            losses: LossParts { text, pixel, total },
        })
    }

    /// Logits over every position of `[visual; tokens]`, touching only the
    /// projector and LLM.
    pub fn text_logits(&self, features: &Tensor<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let seq = self.build_sequence(&mut g, features, tokens)?;
        let out = self.llm.forward(&mut g, seq.embeddings, &[])?;
        Ok(g.tensor(out.logits))
    }

    /// Projected visual embeddings, one row per visual token.
    pub fn visual_embeddings(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let v = self.project(&mut g, features)?;
        Ok(g.tensor(v))
    }
}

impl<T: Scalar> Module<T> for EmmaModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.vision.visit(f);
        self.projector.visit(f);
        self.llm.visit(f);
        if let Some(m) = &self.mff {
            m.visit(f);
        }
        if let Some(d) = &self.decoder {
            d.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.vision.visit_mut(f);
        self.projector.visit_mut(f);
        self.llm.visit_mut(f);
        if let Some(m) = &mut self.mff {
            m.visit_mut(f);
        }
        if let Some(d) = &mut self.decoder {
            d.visit_mut(f);
        }
    }
}

/// Mean next-token NLL over positions with a target.
pub fn text_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

/// Mean squared error; the squared L2 norm divided by the element count.
pub fn pixel_loss<T: Scalar>(g: &mut Graph<T>, recon: Var, target: Var) -> Result<Var> {
    g.mse(recon, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mllm::tokenizer;

    fn setup(cfg: &EmmaConfig) -> (EmmaModel<f64>, Example<f64>) {
        let model = EmmaModel::new(cfg, 7).unwrap();
        let mut init = Init::new(11);
        let img = init.uniform::<f64>(vec![3, cfg.image_size, cfg.image_size], 0.5);
        let img = Tensor::new(img.shape().to_vec(), img.data().iter().map(|v| v + 0.5).collect()).unwrap();
        let ex = model.example(img, tokenizer::encode("red square").unwrap()).unwrap();
        (model, ex)
    }

    #[test]
    fn sequence_layout() {
        let cfg = EmmaConfig::tiny();
        let (model, ex) = setup(&cfg);
        let mut g = Graph::no_grad();
        let seq = model.build_sequence(&mut g, &ex.features, &ex.tokens).unwrap();
        assert_eq!(seq.len(), cfg.num_patches() + 12);
        assert_eq!(g.shape(seq.embeddings), &[seq.len(), cfg.d_model]);
        assert_eq!(seq.mask_sum(), 11);
        assert!(seq.targets[..cfg.num_patches()].iter().all(Option::is_none));
        assert_eq!(seq.targets[cfg.num_patches()], Some(usize::from(b'r')));
        assert!(model.build_sequence(&mut g, &ex.features, &[]).is_err());
        assert!(model.build_sequence(&mut g, &ex.features, &[999]).is_err());
    }

    #[test]
    fn losses_positive_and_lambda_zero_is_text_only() {
        let cfg = EmmaConfig {
            lambda_pixel: 0.0,
            ..EmmaConfig::tiny()
        };
        let (model, ex) = setup(&cfg);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &ex).unwrap();
        let l = out.losses;
        assert!(g.item(l.text) > 0.0 && g.item(l.pixel.unwrap()) > 0.0);
        assert_eq!(g.item(l.total), g.item(l.text));
        assert_eq!(out.visual_hidden.len(), 4);
        assert_eq!(g.shape(out.recon.unwrap()), ex.image.shape());
    }

    #[test]
    fn no_pal_leaves_heads_without_gradient() {
        let cfg = EmmaConfig {
            use_pal: false,
            ..EmmaConfig::tiny()
        };
        let (model, ex) = setup(&cfg);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &ex).unwrap();
        g.backward(out.losses.total).unwrap();
        assert!(out.losses.pixel.is_none());
        model
            .decoder
            .as_ref()
            .unwrap()
            .visit(&mut |p| assert!(g.param_grad(&p.name).is_none()));
        model
            .mff
            .as_ref()
            .unwrap()
            .visit(&mut |p| assert!(g.param_grad(&p.name).is_none()));
        assert!(g.param_grad("projector.0.weight").is_some());
    }

    #[test]
    fn feature_alignment_target() {
        let cfg = EmmaConfig {
            align_visual_features: true,
            use_mff: false,
            ..EmmaConfig::tiny()
        };
        let (model, ex) = setup(&cfg);
        assert!(model.mff.is_none());
        let mut g = Graph::new();
        let out = model.forward(&mut g, &ex).unwrap();
        assert_eq!(g.shape(out.recon.unwrap()), ex.features.shape());
    }

    #[test]
    fn stripped_model_gives_identical_logits() {
        let cfg = EmmaConfig::tiny();
        let (model, ex) = setup(&cfg);
        let mut bare = model.clone();
        bare.strip_alignment_heads();
        assert_eq!(
            model.text_logits(&ex.features, &ex.tokens).unwrap(),
            bare.text_logits(&ex.features, &ex.tokens).unwrap()
        );
        let mut g = Graph::new();
        assert!(matches!(bare.forward(&mut g, &ex), Err(Error::MissingComponent(_))));
    }
}
