//! Fast invariant suite behind the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::generation::{generate, StopRule};
use crate::bench::latency::LatencyReport;
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradFn};
use crate::graph::{Graph, Var};
use crate::mllm::{checkpoint, tokenizer, EmmaConfig, EmmaModel};
use crate::nn::Init;
use crate::ssm::{apply_conv, conv_kernel, discretize, scan_recurrent, LtiSystem};
use crate::tensor::{Scalar, Tensor};
use crate::training::{adamw_update, lr_at, make_dataset, parse_caption, AdamWConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}

struct OpSuite;

impl GradFn for OpSuite {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let (x, w) = (v[0], v[1]);
        let h = g.matmul(x, w)?;
        let h = g.gelu(h)?;
        let ones = g.constant(&Tensor::full(vec![3], T::one()))?;
        let h = g.rms_norm(h, ones, 1e-5)?;
        let s = g.softplus(h)?;
        let h = g.mul(h, s)?;
        g.cross_entropy(h, &[Some(0), Some(2), None, Some(1)])
    }
}

fn gradient_oracle() -> Result<String> {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut init = Init::new(seed);
        let inputs = [init.normal::<f64>(vec![4, 5], 1.0), init.normal::<f64>(vec![5, 3], 0.7)];
        let r32 = gradcheck::check_inputs::<f32, _>(&OpSuite, &inputs, gradcheck::ORACLE_EPS)?;
        let r64 = gradcheck::check_inputs::<f64, _>(&OpSuite, &inputs, gradcheck::ORACLE_EPS)?;
        ensure(r32.max_rel_error < 1e-3, || format!("seed {seed} f32: {:?}", r32.worst))?;
        ensure(r64.max_rel_error < 1e-5, || format!("seed {seed} f64: {:?}", r64.worst))?;
        worst = worst.max(r32.max_rel_error);
    }
    Ok(format!("max rel error (f32) {worst:.2e}"))
}

fn softmax_rows() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vals: Vec<f64> = (0..40).map(|_| rng.random_range(-20.0..20.0)).collect();
    let mut g = Graph::<f64>::no_grad();
    let x = g.constant(&Tensor::from_f64(vec![4, 10], &vals)?)?;
    let s = g.softmax(x, 1)?;
    let shifted = g.constant(&Tensor::from_f64(
        vec![4, 10],
        &vals.iter().map(|v| v + 7.5).collect::<Vec<_>>(),
    )?)?;
    let s2 = g.softmax(shifted, 1)?;
    for (r, (a, b)) in g.value(s).chunks(10).zip(g.value(s2).chunks(10)).enumerate() {
        let sum: f64 = a.iter().sum();
        ensure((sum - 1.0).abs() < 1e-6, || format!("row {r} sums to {sum}"))?;
        let diff = a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        ensure(diff < 1e-12, || format!("row {r} not shift invariant: {diff}"))?;
    }
    Ok("4 rows".into())
}

fn duality() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=16);
        let l = rng.random_range(1..=64);
        let mut v = |lo: f64, hi: f64, k: usize| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let sys = LtiSystem::new(v(-2.0, -0.01, n), v(-1.0, 1.0, n), v(-1.0, 1.0, n), v(0.01, 1.0, 1)[0])?;
        let x = v(-1.0, 1.0, l);
        let d = discretize(&sys)?;
        let (y, _) = scan_recurrent(&d, &sys.c, &x, &vec![0.0; n])?;
        let yc = apply_conv(&conv_kernel(&d, &sys.c, l)?, &x);
        worst = y.iter().zip(&yc).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst < 1e-10, || format!("max diff {worst:e}"))?;
    Ok(format!("max diff {worst:.1e}"))
}

fn discretization_limits() -> Result<String> {
    let one = |a: f64, b: f64, delta: f64| -> Result<(f64, f64)> {
        let d = discretize(&LtiSystem::new(vec![a], vec![b], vec![1.0], delta)?)?;
        Ok((d.a_bar[0], d.b_bar[0]))
    };
    let (ab, bb) = one(-1.0, 1.0, 1.0)?;
    ensure(
        (ab - (-1.0f64).exp()).abs() < 1e-12 && (bb - (1.0 - (-1.0f64).exp())).abs() < 1e-12,
        || format!("scalar case {ab} {bb}"),
    )?;
    let (ab, bb) = one(0.0, 0.7, 0.3)?;
    ensure(ab == 1.0 && bb == 0.3 * 0.7, || format!("A=0 case {ab} {bb}"))?;
    let (ab, bb) = one(-1.0, 1.0, 1e-9)?;
    ensure((ab - 1.0).abs() < 1e-8 && bb.abs() < 1e-8, || {
        format!("tiny step {ab} {bb}")
    })?;
    Ok("ok".into())
}

fn tiny_model() -> Result<(EmmaModel<f32>, Tensor<f32>)> {
    let cfg = EmmaConfig::tiny();
    let model = EmmaModel::new(&cfg, 1)?;
    let data = make_dataset::<f32>(2, 1, cfg.image_size)?;
    let features = model.encode_image(&data[0].image)?;
    Ok((model, features))
}

fn incremental_decoding() -> Result<String> {
    let (model, features) = tiny_model()?;
    let prompt = tokenizer::encode_prompt("red");
    let gen = generate(&model, &features, &prompt, 32, StopRule::Forced)?;
    let mut all = prompt.clone();
    all.extend(&gen.tokens[..gen.tokens.len() - 1]);
    let full = model.text_logits(&features, &all)?;
    let (v, k) = (model.cfg.vocab_size, model.cfg.num_patches());
    let mut worst = 0.0f32;
    for (i, step) in gen.logits.iter().enumerate() {
        let row = &full.data()[(k + prompt.len() - 1 + i) * v..][..v];
        worst = row.iter().zip(step).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    ensure(worst < 1e-4, || format!("max diff {worst:e}"))?;
    Ok(format!("32 tokens, max diff {worst:.1e}"))
}

fn causality() -> Result<String> {
    let (model, features) = tiny_model()?;
    let a = tokenizer::encode("red square top left")?;
    let mut b = a.clone();
    let t = a.len() - 2;
    b[t] = usize::from(b'z');
    let (la, lb) = (model.text_logits(&features, &a)?, model.text_logits(&features, &b)?);
    let v = model.cfg.vocab_size;
    let cut = (model.cfg.num_patches() + t) * v;
    ensure(la.data()[..cut] == lb.data()[..cut], || "earlier logits changed".into())?;
    ensure(la.data()[cut..] != lb.data()[cut..], || {
        "perturbation had no effect".into()
    })?;
    Ok("ok".into())
}

fn inference_invariance() -> Result<String> {
    let (model, features) = tiny_model()?;
    let mut bare = model.clone();
    bare.strip_alignment_heads();
    let ids = tokenizer::encode("blue circle middle center")?;
    ensure(
        model.text_logits(&features, &ids)? == bare.text_logits(&features, &ids)?,
        || "logits differ without alignment heads".into(),
    )?;
    Ok("bitwise identical".into())
}

fn latency_arithmetic() -> Result<String> {
    let r = LatencyReport::from_timing(342.0, 200, 256)?;
    ensure((r.t_avg - 1.71).abs() < 1e-12, || format!("T_avg {}", r.t_avg))?;
    ensure(((r.n_avg * r.t_avg) / 256.0 - 1.0).abs() < 1e-9, || {
        "N_avg·T_avg ≠ n_tokens".into()
    })?;
    Ok(format!("N_avg {:.2}", r.n_avg))
}

fn optimizer_and_schedule() -> Result<String> {
    let mut th = [1.0f64];
    adamw_update(
        &mut th,
        &[1.0],
        &mut [0.0],
        &mut [0.0],
        1,
        0.1,
        0.0,
        &AdamWConfig::default(),
    )?;
    ensure((th[0] - 0.9).abs() < 1e-6, || format!("adam step gave {}", th[0]))?;
    let (total, peak) = (200, 1e-3);
    let warm = (0.03 * total as f64).ceil() as usize;
    ensure(lr_at(warm, total, peak, 0.03) == peak, || "warmup end".into())?;
    ensure(lr_at(total, total, peak, 0.03).abs() < 1e-12, || "final lr".into())?;
    let nonincreasing = (warm..total).all(|s| lr_at(s + 1, total, peak, 0.03) <= lr_at(s, total, peak, 0.03));
    ensure(nonincreasing, || "cosine phase increases".into())?;
    Ok("ok".into())
}

fn checkpoint_round_trip() -> Result<String> {
    let (model, _) = tiny_model()?;
    let bytes = checkpoint::to_bytes(&model);
    let back: EmmaModel<f32> = checkpoint::from_bytes(&bytes)?;
    ensure(back == model, || "round trip changed the model".into())?;
    Ok(format!("{} bytes", bytes.len()))
}

fn dataset_round_trip() -> Result<String> {
    let data = make_dataset::<f32>(9, 64, 32)?;
    for s in &data {
        ensure(parse_caption(&s.caption)? == s.scene, || {
            format!("parse mismatch for {:?}", s.caption)
        })?;
    }
    ensure(data == make_dataset::<f32>(9, 64, 32)?, || {
        "dataset not reproducible".into()
    })?;
    Ok("64 captions".into())
}

fn backward_determinism() -> Result<String> {
    let (model, features) = tiny_model()?;
    let image = Tensor::full(vec![3, model.cfg.image_size, model.cfg.image_size], 0.25);
    let ex = crate::mllm::Example {
        image,
        features,
        tokens: tokenizer::encode("green triangle bottom left")?,
    };
    let grads = || -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &ex)?;
        g.backward(out.losses.total)?;
        Ok(g.param_grad("llm.embed").map(<[f32]>::to_vec).unwrap_or_default())
    };
    ensure(grads()? == grads()?, || "gradients differ between runs".into())?;
    Ok("bitwise identical".into())
}

type Check = (&'static str, fn() -> Result<String>);

pub const CHECKS: &[Check] = &[
    ("gradient oracle", gradient_oracle),
    ("softmax rows", softmax_rows),
    ("recurrence/convolution duality", duality),
    ("discretization limits", discretization_limits),
    ("incremental decoding", incremental_decoding),
    ("causality", causality),
    ("inference invariance", inference_invariance),
    ("latency arithmetic", latency_arithmetic),
    ("optimizer and schedule", optimizer_and_schedule),
    ("checkpoint round trip", checkpoint_round_trip),
    ("dataset round trip", dataset_round_trip),
    ("backward determinism", backward_determinism),
];

pub fn run_selftest() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f() {
            Ok(detail) => CheckOutcome {
                name,
                passed: true,
                detail,
            },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
