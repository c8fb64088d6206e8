//! End-to-end acceptance suite. Runs without the libtest harness so every
//! criterion prints its own PASS/FAIL line; exits nonzero if any fails.
//!
//! `cargo test -p emma-core --test acceptance -- <substring>` runs only the
//! criteria whose name contains the substring.

use std::process::ExitCode;
use std::time::Instant;

use emma_core::bench::{self, latency, LatencyReport, StopRule};
use emma_core::gradcheck::{self, GradCheckReport, GradFn, GradProbe};
use emma_core::mllm::{checkpoint, tokenizer, EmmaConfig, EmmaModel, FusionBlock, ImageDecoder};
use emma_core::nn::{Init, Module, Param};
use emma_core::ssm::{apply_conv, conv_kernel, discretize, scan_recurrent, LtiSystem, MambaLayer, MambaVersion};
use emma_core::training::{self, fit_decoder, make_dataset, RunConfig};
use emma_core::{Error, Graph, Result, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const TOL_32: f64 = 1e-3;
const TOL_64: f64 = 1e-5;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}

fn normal(init: &mut Init, shape: Vec<usize>, std: f64) -> Tensor<f64> {
    // round through f32 so both precisions see the same values
    init.normal::<f64>(shape, std).cast::<f32>().cast()
}

// ---------------------------------------------------------------------------
// 1. gradient oracle
// ---------------------------------------------------------------------------

/// `sum(out ⊙ R)` for a fixed random `R`, so every output coordinate
/// carries a distinct cotangent.
fn project<T: Scalar>(g: &mut Graph<T>, out: Var, seed: u64) -> Result<Var> {
    let r = normal(&mut Init::new(seed ^ 0xa5a5), g.shape(out).to_vec(), 1.0);
    let r = g.constant(&r.cast())?;
    let p = g.mul(out, r)?;
    g.sum(p)
}

struct Matmul(u64);
impl GradFn for Matmul {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let h = g.matmul(v[0], v[1])?;
        let h = g.linear(h, v[2], Some(v[3]))?;
        project(g, h, self.0)
    }
}

struct Activations(u64);
impl GradFn for Activations {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let x = v[0];
        let mut terms = vec![
            g.gelu(x)?,
            g.silu(x)?,
            g.sigmoid(x)?,
            g.softplus(x)?,
            g.square(x)?,
            g.neg(x)?,
        ];
        let e = g.scale(x, T::from_f64(0.5))?;
        terms.push(g.exp(e)?);
        let s = g.sigmoid(x)?;
        terms.push(g.log(s)?);
        let mut acc = terms[0];
        for (i, &t) in terms.iter().enumerate().skip(1) {
            let w = g.scale(t, T::from_f64(1.0 / (i + 1) as f64))?;
            acc = g.add(acc, w)?;
        }
        project(g, acc, self.0)
    }
}

struct Softmax(u64);
impl GradFn for Softmax {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let rows = g.softmax(v[0], 1)?;
        let cols = g.softmax(v[0], 0)?;
        let both = g.add(rows, cols)?;
        project(g, both, self.0)
    }
}

struct Norms(u64);
impl GradFn for Norms {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let r = g.rms_norm(v[0], v[1], 1e-5)?;
        let l = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let both = g.add(r, l)?;
        project(g, both, self.0)
    }
}

/// Inputs are raw; Δ goes through softplus and `A = −exp(a)` as in the block.
struct SelectiveScan(u64);
impl GradFn for SelectiveScan {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let delta = g.softplus(v[1])?;
        let a = g.exp(v[2])?;
        let a = g.neg(a)?;
        let (y, _) = g.selective_scan(v[0], delta, a, v[3], v[4], v[5], None)?;
        project(g, y, self.0)
    }
}

struct CausalConv(u64);
impl GradFn for CausalConv {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let y = g.causal_conv(v[0], v[1], v[2])?;
        project(g, y, self.0)
    }
}

struct Losses;
impl GradFn for Losses {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let ce = g.cross_entropy(v[0], &[Some(3), None, Some(0), Some(6), Some(3)])?;
        let mse = g.mse(v[1], v[2])?;
        g.add(ce, mse)
    }
}

/// A module together with trainable stand-ins for its inputs, so the
/// parameter oracle also covers input gradients.
#[derive(Clone)]
struct WithInputs<M, T> {
    inner: M,
    inputs: Vec<Param<T>>,
}

impl<T: Scalar, M: Module<T>> Module<T> for WithInputs<M, T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.inner.visit(f);
        self.inputs.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.inner.visit_mut(f);
        self.inputs.iter_mut().for_each(f);
    }
}

fn input_params<T: Scalar>(seed: u64, shapes: &[Vec<usize>]) -> Vec<Param<T>> {
    let mut init = Init::new(seed ^ 0x1234);
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Param::new(
                format!("probe.input.{i}"),
                normal(&mut init, s.clone(), 1.0).cast(),
                false,
            )
        })
        .collect()
}

fn probe_cfg() -> EmmaConfig {
    EmmaConfig::tiny()
}

struct MambaProbe(u64, MambaVersion);
impl GradProbe for MambaProbe {
    type Model<T: Scalar> = WithInputs<MambaLayer<T>, T>;

    fn build<T: Scalar>(&self) -> Result<Self::Model<T>> {
        let cfg = probe_cfg();
        let mut mc = cfg.mamba(cfg.d_model);
        mc.version = self.1;
        Ok(WithInputs {
            inner: MambaLayer::new(&mut Init::new(self.0), "probe.mamba", mc),
            inputs: input_params(self.0, &[vec![5, cfg.d_model]]),
        })
    }

    fn loss<T: Scalar>(&self, m: &Self::Model<T>, g: &mut Graph<T>) -> Result<Var> {
        let x = m.inputs[0].var(g)?;
        let y = m.inner.forward(g, x)?;
        project(g, y, self.0)
    }
}

struct FusionProbe(u64);
impl GradProbe for FusionProbe {
    type Model<T: Scalar> = WithInputs<FusionBlock<T>, T>;

    fn build<T: Scalar>(&self) -> Result<Self::Model<T>> {
        let cfg = probe_cfg();
        let k = cfg.num_patches();
        Ok(WithInputs {
            inner: FusionBlock::new(&mut Init::new(self.0), "probe.fusion", &cfg),
            inputs: input_params(self.0, &[vec![k, cfg.d_model], vec![k, cfg.d_model]]),
        })
    }

    fn loss<T: Scalar>(&self, m: &Self::Model<T>, g: &mut Graph<T>) -> Result<Var> {
        let x = m.inputs[0].var(g)?;
        let y = m.inputs[1].var(g)?;
        let out = m.inner.forward(g, x, y)?;
        project(g, out, self.0)
    }
}

/// Decoder followed by the pixel loss (or the feature loss when `avf`).
struct DecoderProbe(u64, bool);
impl GradProbe for DecoderProbe {
    type Model<T: Scalar> = WithInputs<ImageDecoder<T>, T>;

    fn build<T: Scalar>(&self) -> Result<Self::Model<T>> {
        let mut cfg = probe_cfg();
        cfg.align_visual_features = self.1;
        Ok(WithInputs {
            inner: ImageDecoder::new(&mut Init::new(self.0), &cfg),
            inputs: input_params(self.0, &[vec![cfg.num_patches(), cfg.d_model]]),
        })
    }

    fn loss<T: Scalar>(&self, m: &Self::Model<T>, g: &mut Graph<T>) -> Result<Var> {
        let x = m.inputs[0].var(g)?;
        let recon = m.inner.forward(g, x)?;
        let target: Tensor<T> = if self.1 {
            normal(&mut Init::new(self.0 + 7), g.shape(recon).to_vec(), 1.0).cast()
        } else {
            make_dataset::<f32>(self.0, 1, m.inner.cfg.image_size)?
                .remove(0)
                .image
                .cast()
        };
        let t = g.constant(&target)?;
        emma_core::mllm::pixel_loss(g, recon, t)
    }
}

#[derive(Default)]
struct Tally {
    worst32: f64,
    worst64: f64,
    failures: Vec<String>,
}

impl Tally {
    fn record(&mut self, op: &str, seed: u64, r32: GradCheckReport, r64: GradCheckReport) {
        self.worst32 = self.worst32.max(r32.max_rel_error);
        self.worst64 = self.worst64.max(r64.max_rel_error);
        if r32.max_rel_error >= TOL_32 {
            self.failures.push(format!(
                "{op} seed {seed} 32-bit {:.2e} at {:?}",
                r32.max_rel_error, r32.worst
            ));
        }
        if r64.max_rel_error >= TOL_64 {
            self.failures.push(format!(
                "{op} seed {seed} 64-bit {:.2e} at {:?}",
                r64.max_rel_error, r64.worst
            ));
        }
    }

    fn inputs<F: GradFn>(&mut self, op: &str, seed: u64, f: &F, inputs: &[Tensor<f64>]) -> Result<()> {
        let r32 = gradcheck::check_inputs::<f32, _>(f, inputs, gradcheck::ORACLE_EPS)?;
        let r64 = gradcheck::check_inputs::<f64, _>(f, inputs, gradcheck::ORACLE_EPS)?;
        self.record(op, seed, r32, r64);
        Ok(())
    }

    fn params<P: GradProbe>(&mut self, op: &str, seed: u64, p: &P) -> Result<()> {
        let r32 = gradcheck::check_params::<f32, P>(p, gradcheck::ORACLE_EPS, 1)?;
        let r64 = gradcheck::check_params::<f64, P>(p, gradcheck::ORACLE_EPS, 1)?;
        self.record(op, seed, r32, r64);
        Ok(())
    }
}

fn gradient_oracle() -> Result<String> {
    let started = Instant::now();
    let mut t = Tally::default();
    for seed in 0..SEEDS {
        let mut init = Init::new(100 + seed);
        let mut n = |shape: Vec<usize>, std: f64| normal(&mut init, shape, std);

        t.inputs(
            "matmul",
            seed,
            &Matmul(seed),
            &[
                n(vec![4, 5], 1.0),
                n(vec![5, 3], 0.7),
                n(vec![3, 2], 0.7),
                n(vec![2], 0.5),
            ],
        )?;
        t.inputs("activations", seed, &Activations(seed), &[n(vec![3, 7], 1.5)])?;
        t.inputs("softmax", seed, &Softmax(seed), &[n(vec![4, 6], 2.0)])?;
        t.inputs(
            "norms",
            seed,
            &Norms(seed),
            &[n(vec![3, 8], 1.0), n(vec![8], 1.0), n(vec![8], 0.5)],
        )?;
        let (l, d, s) = (7, 3, 4);
        t.inputs(
            "selective_scan",
            seed,
            &SelectiveScan(seed),
            &[
                n(vec![l, d], 1.0),
                n(vec![l, d], 1.0),
                n(vec![d, s], 0.5),
                n(vec![l, s], 1.0),
                n(vec![l, s], 1.0),
                n(vec![d], 1.0),
            ],
        )?;
        t.inputs(
            "causal_conv",
            seed,
            &CausalConv(seed),
            &[n(vec![6, 3], 1.0), n(vec![3, 4], 0.5), n(vec![3], 0.5)],
        )?;
        t.inputs(
            "losses",
            seed,
            &Losses,
            &[n(vec![5, 7], 2.0), n(vec![3, 4], 1.0), n(vec![3, 4], 1.0)],
        )?;
        t.params("mamba_v1", seed, &MambaProbe(seed, MambaVersion::V1))?;
        t.params("mamba_v2", seed, &MambaProbe(seed, MambaVersion::V2))?;
        t.params("fusion_block", seed, &FusionProbe(seed))?;
        t.params("decode_image", seed, &DecoderProbe(seed, false))?;
        t.params("decode_features", seed, &DecoderProbe(seed, true))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(t.failures.is_empty(), || t.failures.join("; "))?;
    ensure(secs < 120.0, || format!("suite took {secs:.1}s"))?;
    Ok(format!(
        "{SEEDS} seeds, max rel error 32-bit {:.2e}, 64-bit {:.2e}, {secs:.1}s",
        t.worst32, t.worst64
    ))
}

// ---------------------------------------------------------------------------
// 2-3. LTI systems
// ---------------------------------------------------------------------------

fn duality() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let l = rng.random_range(1..=64);
        let mut v = |lo: f64, hi: f64, k: usize| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let sys = LtiSystem::new(v(-3.0, -0.01, n), v(-1.0, 1.0, n), v(-1.0, 1.0, n), v(0.001, 1.0, 1)[0])?;
        let x = v(-1.0, 1.0, l);
        let d = discretize(&sys)?;
        let (y, _) = scan_recurrent(&d, &sys.c, &x, &vec![0.0; n])?;
        let yc = apply_conv(&conv_kernel(&d, &sys.c, l)?, &x);
        worst = y.iter().zip(&yc).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst < 1e-10, || format!("max abs diff {worst:e}"))?;
    Ok(format!("100 systems, max abs diff {worst:.1e}"))
}

fn discretization_limits() -> Result<String> {
    let one = |a: f64, b: f64, delta: f64| -> Result<(f64, f64)> {
        let d = discretize(&LtiSystem::new(vec![a], vec![b], vec![1.0], delta)?)?;
        Ok((d.a_bar[0], d.b_bar[0]))
    };
    for (b, delta) in [(0.7, 0.3), (-2.5, 1.0), (1.0, 1e-9)] {
        let (_, bb) = one(0.0, b, delta)?;
        ensure(bb == delta * b, || format!("A=0: B̄={bb}, ΔB={}", delta * b))?;
    }
    let (ab, bb) = one(-1.0, 1.0, 1e-9)?;
    ensure((ab - 1.0).abs() < 1e-8 && bb.abs() < 1e-8, || {
        format!("Δ=1e-9: Ā={ab} B̄={bb}")
    })?;
    let (ab, bb) = one(-1.0, 1.0, 1.0)?;
    let e = (-1.0f64).exp();
    ensure((ab - e).abs() < 1e-12 && (bb - (1.0 - e)).abs() < 1e-12, || {
        format!("Δ=1, A=-1: Ā={ab} B̄={bb}")
    })?;
    Ok("A=0 exact, Δ→0, scalar closed form".into())
}

// ---------------------------------------------------------------------------
// 4-6. model-level properties
// ---------------------------------------------------------------------------

fn default_model(seed: u64) -> Result<(EmmaModel<f32>, Tensor<f32>)> {
    let cfg = EmmaConfig::default();
    let model = EmmaModel::new(&cfg, seed)?;
    let image = make_dataset::<f32>(seed + 50, 1, cfg.image_size)?.remove(0).image;
    let features = model.encode_image(&image)?;
    Ok((model, features))
}

fn incremental_decoding() -> Result<String> {
    let mut worst = 0.0f32;
    for seed in [0, 1] {
        let (model, features) = default_model(seed)?;
        let prompt = tokenizer::encode_prompt("Describe this image");
        let gen = bench::generate(&model, &features, &prompt, 64, StopRule::Forced)?;
        ensure(gen.logits.len() == 64, || format!("{} steps", gen.logits.len()))?;
        let mut all = prompt.clone();
        all.extend(&gen.tokens[..63]);
        let full = model.text_logits(&features, &all)?;
        let (v, k) = (model.cfg.vocab_size, model.cfg.num_patches());
        for (i, step) in gen.logits.iter().enumerate() {
            let row = &full.data()[(k + prompt.len() - 1 + i) * v..][..v];
            worst = row.iter().zip(step).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
        }
    }
    ensure(worst < 1e-4, || format!("max abs diff {worst:e}"))?;
    Ok(format!("64 positions x 2 models, max abs diff {worst:.1e}"))
}

/// Every residual stream (depth 0..=n_layers) and the logits.
fn all_layers(model: &EmmaModel<f32>, features: &Tensor<f32>, tokens: &[usize]) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::no_grad();
    let seq = model.build_sequence(&mut g, features, tokens)?;
    let depths: Vec<usize> = (0..=model.cfg.n_layers).collect();
    let out = model.llm.forward(&mut g, seq.embeddings, &depths)?;
    Ok(out
        .streams
        .iter()
        .chain([&out.logits])
        .map(|&v| g.value(v).to_vec())
        .collect())
}

fn causality() -> Result<String> {
    let (model, features) = default_model(3)?;
    let tokens = tokenizer::encode("red square top left; blue circle bottom right")?;
    let k = model.cfg.num_patches();
    let base = all_layers(&model, &features, &tokens)?;
    let widths: Vec<usize> = base.iter().map(|l| l.len() / (k + tokens.len())).collect();
    let mut checked = 0;
    // positions in the visual prefix and in the text
    for t in [5, k - 1, k + 1, k + 20, k + tokens.len() - 1] {
        let (mut f2, mut t2) = (features.clone(), tokens.clone());
        if t < k {
            let d = model.cfg.d_vision;
            f2.data_mut()[t * d..(t + 1) * d].iter_mut().for_each(|x| *x += 0.5);
        } else {
            t2[t - k] = usize::from(b'#');
        }
        let pert = all_layers(&model, &f2, &t2)?;
        for (depth, ((a, b), w)) in base.iter().zip(&pert).zip(&widths).enumerate() {
            ensure(a[..t * w] == b[..t * w], || {
                format!("position {t} leaked backwards at layer {depth}")
            })?;
        }
        let last = base.len() - 1;
        ensure(base[last][t * widths[last]..] != pert[last][t * widths[last]..], || {
            format!("perturbing position {t} changed nothing")
        })?;
        checked += 1;
    }
    Ok(format!("{checked} positions, {} layers each, exact", base.len()))
}

fn inference_invariance() -> Result<String> {
    let mut n = 0;
    for (seed, caption) in [
        (4, "green triangle middle center"),
        (5, "red circle top right; blue square bottom left"),
    ] {
        let (model, features) = default_model(seed)?;
        ensure(model.mff.is_some() && model.decoder.is_some(), || {
            "alignment heads missing".into()
        })?;
        let mut bare = model.clone();
        bare.strip_alignment_heads();
        let ids = tokenizer::encode(caption)?;
        let (a, b) = (model.text_logits(&features, &ids)?, bare.text_logits(&features, &ids)?);
        ensure(a.data() == b.data(), || format!("logits differ for seed {seed}"))?;
        let p = tokenizer::encode_prompt("Describe");
        let (ga, gb) = (
            bench::generate(&model, &features, &p, 16, StopRule::Forced)?,
            bench::generate(&bare, &features, &p, 16, StopRule::Forced)?,
        );
        ensure(ga == gb, || "generation differs".into())?;
        n += 1;
    }
    Ok(format!("{n} models, logits and generations bitwise identical"))
}

// ---------------------------------------------------------------------------
// 7, 8, 10. training
// ---------------------------------------------------------------------------

fn train_checked(label: &str, run: &RunConfig) -> Result<(EmmaModel<f32>, training::MetricsLog)> {
    let started = Instant::now();
    let (model, log) = training::train_run::<f32>(run)?;
    let finite = log.records.iter().all(|r| {
        r.loss_text.is_finite() && r.loss_pixel.is_finite() && r.loss_total.is_finite() && r.grad_norm.is_finite()
    });
    ensure(finite, || format!("{label}: non-finite metrics"))?;
    println!(
        "    {label}: {} steps in {:.1}s",
        log.records.len(),
        started.elapsed().as_secs_f64()
    );
    Ok((model, log))
}

fn decoder_values(m: &EmmaModel<f32>) -> Vec<f32> {
    let mut out = Vec::new();
    if let Some(d) = &m.decoder {
        d.visit(&mut |p| out.extend_from_slice(p.data()));
    }
    out
}

/// Mean absolute difference of the final-depth activation heatmaps of two
/// models on the same image.
fn late_heatmap_difference(a: &EmmaModel<f32>, b: &EmmaModel<f32>) -> Result<f64> {
    let image = make_dataset::<f32>(77, 1, a.cfg.image_size)?.remove(0).image;
    let last = |m: &EmmaModel<f32>| -> Result<Vec<f64>> {
        let maps = bench::activation_heatmaps(m, &image, latency::DEFAULT_PROMPT)?;
        Ok(maps.into_iter().last().expect("final depth").norms)
    };
    let (x, y) = (last(a)?, last(b)?);
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64)
}

struct Trained {
    csv: String,
    ckpt: Vec<u8>,
}

fn toy_training(reference: &mut Option<Trained>) -> Result<String> {
    let started = Instant::now();
    let run = RunConfig::default();
    let (model, log) = train_checked("default", &run)?;
    let (a, b) = (log.first().expect("steps"), log.last().expect("steps"));
    let text = b.loss_text / a.loss_text;
    let pixel = b.loss_pixel / a.loss_pixel;
    *reference = Some(Trained {
        csv: log.to_csv(),
        ckpt: checkpoint::to_bytes(&model),
    });
    ensure(text < 0.5, || {
        format!("L_text {:.4} -> {:.4}", a.loss_text, b.loss_text)
    })?;
    ensure(pixel < 0.5, || {
        format!("L_pixel {:.4} -> {:.4}", a.loss_pixel, b.loss_pixel)
    })?;
    let main_secs = started.elapsed().as_secs_f64();
    ensure(main_secs < 1800.0, || format!("run took {main_secs:.0}s"))?;

    let mut no_pal = run.clone();
    no_pal.model.use_pal = false;
    let init = EmmaModel::<f32>::new(&no_pal.model, no_pal.training.seed)?;
    let (trained, log_np) = train_checked("no-pal", &no_pal)?;
    ensure(decoder_values(&trained) == decoder_values(&init), || {
        "no-pal: decoder moved".into()
    })?;
    ensure(log_np.records.iter().all(|r| r.loss_pixel == 0.0), || {
        "no-pal logged a pixel loss".into()
    })?;
    let heat_diff = late_heatmap_difference(&model, &trained)?;
    ensure(heat_diff > 0.0, || "EMMA and no-pal heatmaps coincide".into())?;

    let mut no_mff = run.clone();
    no_mff.model.use_mff = false;
    let (m_nm, log_nm) = train_checked("no-mff", &no_mff)?;
    ensure(m_nm.mff.is_none(), || "no-mff built a fusion chain".into())?;

    let mut avf = run.clone();
    avf.model.align_visual_features = true;
    let (_, log_avf) = train_checked("avf", &avf)?;

    let curves = [log.to_csv(), log_np.to_csv(), log_nm.to_csv(), log_avf.to_csv()];
    let distinct = (0..4).all(|i| (i + 1..4).all(|j| curves[i] != curves[j]));
    ensure(distinct, || "ablation loss curves coincide".into())?;
    Ok(format!(
        "L_text {:.3} -> {:.3} ({text:.2}x), L_pixel {:.4} -> {:.4} ({pixel:.2}x) in {main_secs:.0}s; \
         ablations finite; final-layer heatmap MAD vs no-pal {heat_diff:.3}",
        a.loss_text, b.loss_text, a.loss_pixel, b.loss_pixel
    ))
}

fn decoder_capacity() -> Result<String> {
    let cfg = EmmaConfig::default();
    let mut model = EmmaModel::<f32>::new(&cfg, 8)?;
    let sample = make_dataset::<f32>(8, 1, cfg.image_size)?.remove(0);
    let losses = fit_decoder(&mut model, &sample.image, &sample.caption, 500, 3e-3)?;
    let (first, min_step) = (losses[0], losses.iter().position(|&l| l < 0.1 * losses[0]));
    let last = *losses.last().expect("losses");
    ensure(min_step.is_some(), || {
        format!("pixel loss {first:.4} -> {last:.4} after 500 steps")
    })?;
    Ok(format!(
        "pixel loss {first:.4} -> {last:.5}; below 10% after {} steps",
        min_step.expect("checked")
    ))
}

fn determinism(reference: &Option<Trained>) -> Result<String> {
    let first = match reference {
        Some(r) => r,
        None => return Err(Error::InvalidArgument("needs the toy training run".into())),
    };
    let (model, log) = train_checked("default (repeat)", &RunConfig::default())?;
    ensure(log.to_csv() == first.csv, || "metrics CSV differs".into())?;
    let bytes = checkpoint::to_bytes(&model);
    ensure(bytes == first.ckpt, || "checkpoint bytes differ".into())?;
    Ok(format!("identical CSV and {}-byte checkpoint", bytes.len()))
}

// ---------------------------------------------------------------------------
// 9. latency
// ---------------------------------------------------------------------------

fn latency_protocol() -> Result<String> {
    let r = LatencyReport::from_timing(342.0, 200, 256)?;
    ensure((r.t_avg - 1.71).abs() < 1e-12, || format!("T_avg {}", r.t_avg))?;
    ensure((r.n_avg - 149.7).abs() < 0.05, || format!("N_avg {}", r.n_avg))?;
    let r = LatencyReport::from_timing(2.0, 1, 256)?;
    ensure(r.t_avg == 2.0 && r.n_avg == 128.0, || format!("{r:?}"))?;

    let (model, features) = default_model(9)?;
    let prompt = tokenizer::encode_prompt(latency::DEFAULT_PROMPT);
    let r = bench::latency_bench(&model, &features, &prompt, 256, 5)?;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    ensure(rel(r.t_avg, r.t_overall / r.repeats as f64) < 1e-9, || "T_avg".into())?;
    ensure(rel(r.n_avg, r.n_tokens as f64 / r.t_avg) < 1e-9, || "N_avg".into())?;
    ensure(rel(r.n_avg * r.t_avg, r.n_tokens as f64) < 1e-9, || {
        "N_avg·T_avg".into()
    })?;
    let (t16, t256) = (r.per_token_at(16).expect("probe"), r.per_token_at(256).expect("probe"));
    ensure(t256 <= 2.0 * t16, || {
        format!("per-token {t16:.2e}s at 16 vs {t256:.2e}s at 256")
    })?;
    Ok(format!(
        "342/200/256 -> {:.2}s, {:.1} tok/s; per-token {:.3}ms at 16, {:.3}ms at 256 ({:.2}x)",
        1.71,
        256.0 / 1.71,
        t16 * 1e3,
        t256 * 1e3,
        t256 / t16
    ))
}

type Criterion<'a> = (&'static str, Box<dyn FnMut() -> Result<String> + 'a>);

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut reference = None;
    let criteria: Vec<Criterion> = vec![
        ("1 gradient oracle", Box::new(gradient_oracle)),
        ("2 recurrence/convolution duality", Box::new(duality)),
        ("3 discretization limits", Box::new(discretization_limits)),
        ("4 incremental decoding", Box::new(incremental_decoding)),
        ("5 causality", Box::new(causality)),
        ("6 inference invariance", Box::new(inference_invariance)),
        (
            "7 toy training and ablations",
            Box::new(|| toy_training(&mut reference)),
        ),
        ("8 decoder capacity", Box::new(decoder_capacity)),
        ("9 latency protocol", Box::new(latency_protocol)),
    ];
    let mut failed = 0;
    let mut ran = 0;
    let mut report = |name: &str, res: Result<String>| {
        ran += 1;
        match res {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {name}: {e}");
            }
        }
    };
    let selected = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    for (name, mut f) in criteria {
        if selected(name) {
            report(name, f());
        }
    }
    let name = "10 determinism";
    if selected(name) {
        if reference.is_none() {
            // criterion 7 was filtered out; produce the first run here
            let run = RunConfig::default();
            match train_checked("default", &run) {
                Ok((m, log)) => {
                    reference = Some(Trained {
                        csv: log.to_csv(),
                        ckpt: checkpoint::to_bytes(&m),
                    })
                }
                Err(e) => report(name, Err(e)),
            }
        }
        if reference.is_some() {
            report(name, determinism(&reference));
        }
    }
    println!("{ran} criteria, {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
