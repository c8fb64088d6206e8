use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[model]
image_size = 8
d_vision = 8
vision_layers = 1
d_model = 8
d_state = 4
decoder_layers = 1

[training]
n_samples = 8
batch_size = 4
epochs = 1
";

fn emma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emma"))
        .args(args)
        .output()
        .expect("spawn emma")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = emma(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("Usage"));
}

#[test]
fn selftest_passes() {
    let out = emma(&["selftest"]);
    assert!(out.status.success(), "{}", text(&out.stdout));
    assert!(text(&out.stdout).contains("0 failed"));
}

#[test]
fn train_generate_dump_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();

    let run = dir.path().join("run");
    let out = emma(&["train", "--config", p(&cfg), "--out-dir", p(&run)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,lr,loss_text,loss_pixel,loss_total,grad_norm\n"));
    assert_eq!(metrics.lines().count(), 3);
    let ckpt = run.join("model.ckpt");

    let out = emma(&["generate", "--checkpoint", p(&ckpt), "--tokens", "5", "--forced"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("generated: "));

    let maps = dir.path().join("maps");
    let out = emma(&["dump-activations", "--checkpoint", p(&ckpt), "--out-dir", p(&maps)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(!text(&out.stderr).contains("untrained"));
    for depth in [1, 2, 3, 4] {
        let pgm = std::fs::read_to_string(maps.join(format!("layer{depth}.pgm"))).unwrap();
        assert!(pgm.starts_with("P2\n2 2\n255\n"));
        let csv = std::fs::read_to_string(maps.join(format!("layer{depth}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    let csv = dir.path().join("bench.csv");
    let out = emma(&[
        "bench",
        "--checkpoint",
        p(&ckpt),
        "--repeats",
        "2",
        "--tokens",
        "16",
        "--csv",
        p(&csv),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.starts_with("T_overall="), "{stdout}");
    assert!(stdout.contains(" T_avg=") && stdout.contains(" N_avg="));
    assert!(stdout.contains("per_token[16]="));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);
}

#[test]
fn no_pal_checkpoint_warns_on_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let out = emma(&["train", "--config", p(&cfg), "--no-pal", "--out-dir", p(&run)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let echoed = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("use_pal = false"));

    let maps = dir.path().join("maps");
    let out = emma(&[
        "dump-activations",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--out-dir",
        p(&maps),
    ]);
    assert!(out.status.success());
    assert!(text(&out.stderr).contains("decoder is untrained"));
}

#[test]
fn missing_checkpoint_fails() {
    let out = emma(&["generate", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("loading checkpoint"));
}
