use crate::error::{Error, Result};
use crate::mllm::tokenizer::EOS;
use crate::mllm::EmmaModel;
use crate::ssm::MambaCache;
use crate::tensor::{Scalar, Tensor};

/// Per-layer recurrent caches and the number of positions consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationState<T> {
    pub caches: Vec<MambaCache<T>>,
    pub position: usize,
}

impl<T: Scalar> GenerationState<T> {
    pub fn new(model: &EmmaModel<T>) -> Self {
        Self {
            caches: model.llm.new_caches(),
            position: 0,
        }
    }

    /// Feeds one embedded position; returns the logits predicting the next.
    pub fn step_embedding(&mut self, model: &EmmaModel<T>, x: &[T]) -> Result<Vec<T>> {
        let logits = model.llm.step(x, &mut self.caches)?;
        self.position += 1;
        Ok(logits)
    }

    pub fn step_token(&mut self, model: &EmmaModel<T>, token: usize) -> Result<Vec<T>> {
        let x = model.llm.token_embedding(token)?.to_vec();
        self.step_embedding(model, &x)
    }

    /// Feeds the visual embeddings then the prompt tokens, returning the
    /// logits after every position.
    pub fn prefill(&mut self, model: &EmmaModel<T>, features: &Tensor<T>, prompt: &[usize]) -> Result<Vec<Vec<T>>> {
        let visual = model.visual_embeddings(features)?;
        let d = model.cfg.d_model;
        let mut out = Vec::with_capacity(visual.shape()[0] + prompt.len());
        for row in visual.data().chunks_exact(d) {
            out.push(self.step_embedding(model, row)?);
        }
        for &t in prompt {
            out.push(self.step_token(model, t)?);
        }
        Ok(out)
    }
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopRule {
    /// Stop after emitting EOS.
    AtEos,
    /// Always emit exactly `n_tokens` (benchmark mode).
    Forced,
}

/// Generated ids plus the logits each was chosen from.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation<T> {
    pub tokens: Vec<usize>,
    pub logits: Vec<Vec<T>>,
}

/// Greedy decoding with stateful stepping. `prompt` is usually
/// `[BOS, bytes..]`; it must be non-empty.
pub fn generate<T: Scalar>(
    model: &EmmaModel<T>,
    features: &Tensor<T>,
    prompt: &[usize],
    n_tokens: usize,
    stop: StopRule,
) -> Result<Generation<T>> {
    if n_tokens == 0 {
        return Err(Error::InvalidArgument("n_tokens must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must contain at least one token".into()));
    }
    let mut state = GenerationState::new(model);
    let mut logits = state
        .prefill(model, features, prompt)?
        .pop()
        .expect("prompt is non-empty");
    let mut out = Generation {
        tokens: Vec::with_capacity(n_tokens),
        logits: Vec::with_capacity(n_tokens),
    };
    for i in 0..n_tokens {
        let next = argmax(&logits);
        out.tokens.push(next);
        out.logits.push(logits);
        if (stop == StopRule::AtEos && next == EOS) || i + 1 == n_tokens {
            break;
        }
        logits = state.step_token(model, next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mllm::{tokenizer, EmmaConfig};

    #[test]
    fn step_logits_match_full_forward() {
        let cfg = EmmaConfig::tiny();
        let model = EmmaModel::<f64>::new(&cfg, 5).unwrap();
        let features = model.encode_image(&Tensor::full(vec![3, 8, 8], 0.3)).unwrap();
        let prompt = tokenizer::encode_prompt("hi");
        let gen = generate(&model, &features, &prompt, 12, StopRule::Forced).unwrap();
        assert_eq!(gen.tokens.len(), 12);
        let mut all = prompt.clone();
        all.extend(&gen.tokens[..11]);
        let full = model.text_logits(&features, &all).unwrap();
        let v = cfg.vocab_size;
        let k = cfg.num_patches();
        for (i, step) in gen.logits.iter().enumerate() {
            let row = &full.data()[(k + prompt.len() - 1 + i) * v..][..v];
            let diff = row.iter().zip(step).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "position {i}: {diff}");
        }
        assert!(generate(&model, &features, &prompt, 0, StopRule::Forced).is_err());
    }

    #[test]
    fn argmax_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
