use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use emma_core::bench::{self, latency, StopRule};
use emma_core::mllm::{checkpoint, tokenizer, EmmaModel};
use emma_core::training::{self, make_dataset, RunConfig};
use emma_core::Tensor;

#[derive(Parser)]
#[command(name = "emma", version, about = "Multimodal Mamba with pixel-wise alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic shapes dataset.
    Train(TrainArgs),
    /// Greedy caption generation for one image.
    Generate(GenerateArgs),
    /// Time forced-length generation.
    Bench(BenchArgs),
    /// Write per-layer visual activation heatmaps.
    DumpActivations(DumpArgs),
    /// Run the invariant suite; exits nonzero on any failure.
    Selftest,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with [model] and [training] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Align only the final-layer visual states (no feature fusion).
    #[arg(long)]
    no_mff: bool,
    /// Drop the pixel-wise alignment loss.
    #[arg(long)]
    no_pal: bool,
    /// Align encoder features instead of pixels.
    #[arg(long)]
    avf: bool,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            run.training.seed = s;
        }
        run.model.use_mff &= !self.no_mff;
        run.model.use_pal &= !self.no_pal;
        run.model.align_visual_features |= self.avf;
        run.model.validate()?;
        run.training.validate()?;
        Ok(run)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for the checkpoint, metrics and config echo.
    #[arg(long, default_value = "runs/emma")]
    out_dir: PathBuf,
    /// Checkpoint path (default: <out-dir>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long)]
    no_clip: bool,
    /// Prepare examples on a background thread.
    #[arg(long)]
    prefetch: bool,
}

#[derive(Args)]
struct ImageArgs {
    /// Binary PPM (P6) image; defaults to a synthetic scene.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Seed of the synthetic scene used when no image is given.
    #[arg(long, default_value_t = 12345)]
    scene_seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    image: ImageArgs,
    /// Text the caption continues from.
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 96)]
    tokens: usize,
    /// Emit exactly --tokens ids without stopping at end-of-text.
    #[arg(long)]
    forced: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Model to time; a freshly initialised model is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    image: ImageArgs,
    #[arg(long, default_value_t = 200)]
    repeats: usize,
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    #[arg(long, default_value = latency::DEFAULT_PROMPT)]
    prompt: String,
    /// Also append the CSV row to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    image: ImageArgs,
    #[arg(long, default_value = latency::DEFAULT_PROMPT)]
    prompt: String,
    #[arg(long, default_value = "heatmaps")]
    out_dir: PathBuf,
}

fn load_model(path: &Path) -> Result<EmmaModel<f32>> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Reads a binary PPM and scales it to `[0,1]`, channel-first.
fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("{}: truncated PPM header", path.display());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_owned());
    }
    if fields[0] != "P6" {
        bail!("{}: only binary PPM (P6) is supported", path.display());
    }
    let (w, h, max): (usize, usize, f32) = (fields[1].parse()?, fields[2].parse()?, fields[3].parse()?);
    let pixels = bytes.get(pos + 1..pos + 1 + w * h * 3).context("truncated PPM data")?;
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = f32::from(px[c]) / max;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

fn pick_image(args: &ImageArgs, image_size: usize) -> Result<(Tensor<f32>, Option<String>)> {
    match &args.image {
        Some(p) => Ok((read_ppm(p)?, None)),
        None => {
            let s = make_dataset::<f32>(args.scene_seed, 1, image_size)?.remove(0);
            Ok((s.image, Some(s.caption)))
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut run = args.common.run_config()?;
    let t = &mut run.training;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.samples {
        t.n_samples = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.peak_lr = v;
    }
    if args.no_clip {
        t.max_grad_norm = 0.0;
    }
    t.prefetch |= args.prefetch;
    run.training.validate()?;

    std::fs::create_dir_all(&args.out_dir)?;
    let ckpt = args.checkpoint.unwrap_or_else(|| args.out_dir.join("model.ckpt"));
    let metrics = args.out_dir.join("metrics.csv");
    std::fs::write(args.out_dir.join("config.toml"), run.to_toml())?;
    println!(
        "training {} samples x {} epochs, batch {}, {} steps",
        run.training.n_samples,
        run.training.epochs,
        run.training.batch_size,
        run.training.total_steps()
    );
    let started = std::time::Instant::now();
    let (model, log) = training::train_run::<f32>(&run)?;
    log.write_csv(&metrics)?;
    checkpoint::save(&model, &ckpt)?;
    if let (Some(a), Some(b)) = (log.first(), log.last()) {
        println!("loss_text {:.4} -> {:.4}", a.loss_text, b.loss_text);
        println!("loss_pixel {:.4} -> {:.4}", a.loss_pixel, b.loss_pixel);
    }
    println!(
        "wrote {} and {} in {:.1}s",
        ckpt.display(),
        metrics.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let (image, caption) = pick_image(&args.image, model.cfg.image_size)?;
    let features = model.encode_image(&image)?;
    let prompt = tokenizer::encode_prompt(&args.prompt);
    let stop = if args.forced { StopRule::Forced } else { StopRule::AtEos };
    let out = bench::generate(&model, &features, &prompt, args.tokens, stop)?;
    if let Some(c) = caption {
        println!("reference: {c}");
    }
    println!("generated: {}{}", args.prompt, tokenizer::decode(&out.tokens));
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let model = match &args.checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let run = args.common.run_config()?;
            EmmaModel::new(&run.model, run.training.seed)?
        }
    };
    let (image, _) = pick_image(&args.image, model.cfg.image_size)?;
    let features = model.encode_image(&image)?;
    let prompt = tokenizer::encode_prompt(&args.prompt);
    let report = bench::latency_bench(&model, &features, &prompt, args.tokens, args.repeats)?;
    print!("{}", report.render());
    if let Some(path) = &args.csv {
        use std::io::Write;
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", bench::LatencyReport::CSV_HEADER)?;
        }
        writeln!(f, "{}", report.csv_row())?;
    }
    Ok(())
}

fn dump(args: DumpArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    if bench::heatmap::decoder_untrained(&model) {
        eprintln!("warning: checkpoint was trained without pixel alignment; its decoder is untrained");
    }
    let (image, _) = pick_image(&args.image, model.cfg.image_size)?;
    let maps = bench::dump_activations(&model, &image, &args.prompt, &args.out_dir)?;
    for m in &maps {
        let (lo, hi) = m
            .norms
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        println!("layer{}: {}x{} norms in [{lo:.4}, {hi:.4}]", m.depth, m.grid, m.grid);
    }
    println!("wrote {} heatmaps to {}", maps.len(), args.out_dir.display());
    Ok(())
}

fn selftest() -> Result<bool> {
    let results = bench::run_selftest();
    let mut ok = true;
    for r in &results {
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(ok)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(a) => train(a)?,
        Command::Generate(a) => generate(a)?,
        Command::Bench(a) => bench_cmd(a)?,
        Command::DumpActivations(a) => dump(a)?,
        Command::Selftest => {
            if !selftest()? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
