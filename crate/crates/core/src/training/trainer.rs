use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mllm::{tokenizer, EmmaConfig, EmmaModel, Example};
use crate::nn::Module;
use crate::tensor::{Scalar, Tensor};
use crate::training::dataset::{make_dataset, Sample};
use crate::training::optim::{clip_grad_norm, grad_norm, lr_at, scale_grads, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Seed of the synthetic dataset.
    pub data_seed: u64,
    pub n_samples: usize,
    /// Render and encode upcoming examples on a background thread.
    pub prefetch: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 2,
            peak_lr: 1e-3,
            weight_decay: 0.1,
            warmup_ratio: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 1.0,
            seed: 0,
            data_seed: 1,
            n_samples: 512,
            prefetch: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.n_samples == 0 {
            return bad("batch_size, epochs and n_samples must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be finite and nonnegative, got {}", self.peak_lr));
        }
        if self.weight_decay < 0.0 || self.max_grad_norm < 0.0 {
            return bad("weight_decay and max_grad_norm must be nonnegative".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// A full run description: the `[model]` and `[training]` tables of a
/// TOML config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: EmmaConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_text: f64,
    pub loss_pixel: f64,
    pub loss_total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<StepMetrics>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,lr,loss_text,loss_pixel,loss_total,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.lr, r.loss_text, r.loss_pixel, r.loss_total, r.grad_norm
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn first(&self) -> Option<&StepMetrics> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&StepMetrics> {
        self.records.last()
    }
}

pub fn to_example<T: Scalar>(model: &EmmaModel<T>, s: &Sample<T>) -> Result<Example<T>> {
    model.example(s.image.clone(), tokenizer::encode(&s.caption)?)
}

/// Per-epoch sample order.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

/// Mean losses of one batch plus accumulated (mean) gradients.
fn batch_gradients<T: Scalar>(model: &mut EmmaModel<T>, batch: &[Example<T>], step: usize) -> Result<[f64; 3]> {
    model.zero_grad();
    let mut sums = [0.0; 3];
    for ex in batch {
        let mut g = Graph::new();
        let out = model.forward(&mut g, ex)?;
        let l = out.losses;
        let vals = [
            g.item(l.text).as_f64(),
            l.pixel.map_or(0.0, |p| g.item(p).as_f64()),
            g.item(l.total).as_f64(),
        ];
        for (what, v) in ["loss_text", "loss_pixel", "loss_total"].iter().zip(vals) {
            check_finite(step, what, v)?;
        }
        g.backward(l.total)?;
        model.accumulate_grads(&g)?;
        sums.iter_mut().zip(vals).for_each(|(s, v)| *s += v);
    }
    let n = batch.len() as f64;
    scale_grads(model, 1.0 / n);
    Ok(sums.map(|s| s / n))
}

/// Trains `model` in place. The frozen vision stub is never updated.
/// Deterministic for a fixed config; prefetching changes only where
/// examples are prepared, not their values or order.
pub fn train<T: Scalar>(model: &mut EmmaModel<T>, data: &[Sample<T>], cfg: &TrainingConfig) -> Result<MetricsLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let batches: Vec<Vec<usize>> = (0..cfg.epochs)
        .flat_map(|e| {
            epoch_order(cfg.seed, e, data.len())
                .chunks(cfg.batch_size)
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect();

    let mut opt = AdamW::new(cfg.adamw());
    let mut log = MetricsLog::default();
    let mut run_step = |model: &mut EmmaModel<T>, step: usize, batch: &[Example<T>]| -> Result<()> {
        let [text, pixel, total_loss] = batch_gradients(model, batch, step)?;
        let norm = if cfg.max_grad_norm > 0.0 {
            clip_grad_norm(model, cfg.max_grad_norm)
        } else {
            grad_norm(model)
        };
        check_finite(step, "grad_norm", norm)?;
        let lr = lr_at(step + 1, total, cfg.peak_lr, cfg.warmup_ratio);
        opt.apply(model, lr)?;
        log.records.push(StepMetrics {
            step,
            lr,
            loss_text: text,
            loss_pixel: pixel,
            loss_total: total_loss,
            grad_norm: norm,
        });
        Ok(())
    };

    if cfg.prefetch {
        // The frozen encoder is all the producer needs; its clone is
        // bitwise identical to the model's.
        let encoder = model.clone();
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<Vec<Example<T>>>>(2);
            let producer = s.spawn(|| {
                let tx = tx;
                for b in &batches {
                    let exs = b.iter().map(|&i| to_example(&encoder, &data[i])).collect();
                    if tx.send(exs).is_err() {
                        break;
                    }
                }
            });
            let mut result = Ok(());
            for (step, exs) in rx.iter().enumerate() {
                result = exs.and_then(|exs| run_step(model, step, &exs));
                if result.is_err() {
                    break;
                }
            }
            drop(rx);
            producer.join().expect("prefetch thread panicked");
            result
        })?;
    } else {
        let examples = data.iter().map(|s| to_example(model, s)).collect::<Result<Vec<_>>>()?;
        for (step, b) in batches.iter().enumerate() {
            let exs: Vec<Example<T>> = b.iter().map(|&i| examples[i].clone()).collect();
            run_step(model, step, &exs)?;
        }
    }
    Ok(log)
}

/// Builds the model and dataset described by `run` and trains it.
pub fn train_run<T: Scalar>(run: &RunConfig) -> Result<(EmmaModel<T>, MetricsLog)> {
    let mut model = EmmaModel::new(&run.model, run.training.seed)?;
    let data = make_dataset(run.training.data_seed, run.training.n_samples, run.model.image_size)?;
    let log = train(&mut model, &data, &run.training)?;
    Ok((model, log))
}

/// Trains only the image decoder to reconstruct one image from the fixed
/// (frozen-LLM) fused visual states. Returns the pixel loss before each
/// update and after the last one.
pub fn fit_decoder<T: Scalar>(
    model: &mut EmmaModel<T>,
    image: &Tensor<T>,
    caption: &str,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let ex = model.example(image.clone(), tokenizer::encode(caption)?)?;
    let fused = {
        let mut g = Graph::no_grad();
        let seq = model.build_sequence(&mut g, &ex.features, &ex.tokens)?;
        let (_, visual) = model.llm_forward(&mut g, &seq)?;
        let f = model.fuse(&mut g, &visual)?;
        g.tensor(f)
    };
    let decoder = model.decoder.as_mut().ok_or(Error::MissingComponent("image decoder"))?;
    let target = match decoder.target {
        crate::mllm::DecoderTarget::Pixels => image.clone(),
        crate::mllm::DecoderTarget::Features => ex.features.clone(),
    };
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let x = g.constant(&fused)?;
        let recon = decoder.forward(&mut g, x)?;
        let t = g.constant(&target)?;
        let loss = g.mse(recon, t)?;
        losses.push(g.item(loss).as_f64());
        check_finite(step, "decoder loss", losses[step])?;
        if step == steps {
            break;
        }
        g.backward(loss)?;
        decoder.zero_grad();
        decoder.accumulate_grads(&g)?;
        opt.apply(decoder, lr)?;
    }
    decoder.zero_grad();
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run() -> RunConfig {
        RunConfig {
            model: EmmaConfig::tiny(),
            training: TrainingConfig {
                batch_size: 4,
                n_samples: 8,
                epochs: 1,
                ..TrainingConfig::default()
            },
        }
    }

    #[test]
    fn config_round_trip() {
        let run = tiny_run();
        assert_eq!(RunConfig::from_toml(&run.to_toml()).unwrap(), run);
        assert!(RunConfig::from_toml("[training]\nwarmup_ratio = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[training]\nunknown = 1\n").is_err());
    }

    #[test]
    fn zero_lr_keeps_init_and_vision_never_moves() {
        let mut run = tiny_run();
        run.training.peak_lr = 0.0;
        run.training.weight_decay = 0.0;
        let init = EmmaModel::<f32>::new(&run.model, 0).unwrap();
        let (model, log) = train_run::<f32>(&run).unwrap();
        assert_eq!(log.records.len(), 2);
        let mut a = model.clone();
        let mut b = init.clone();
        a.zero_grad();
        b.zero_grad();
        assert_eq!(a, b);

        run.training.peak_lr = 1e-2;
        let (model, _) = train_run::<f32>(&run).unwrap();
        assert_eq!(model.vision, init.vision);
        assert_ne!(model.llm.embed.data(), init.llm.embed.data());
    }

    #[test]
    fn prefetch_matches_inline() {
        let run = tiny_run();
        let (_, a) = train_run::<f32>(&run).unwrap();
        let mut p = run.clone();
        p.training.prefetch = true;
        let (_, b) = train_run::<f32>(&p).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with(MetricsLog::HEADER));
    }
}
