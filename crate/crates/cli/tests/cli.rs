use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a few seconds per run
patch_size = 8
embed_dim = 16
depth = 1
num_heads = 2
mlp_ratio = 2
batch_size = 4
steps = 6
eval_interval = 3
prompt_len = 2
num_domains = 3
per_domain_count = 20
target_domain = 1
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_doprompt"));
    c.env("RUST_LOG", "error");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).env("DOPROMPT_OUT", dir.join("runs")).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> i32 {
    run(args, dir).status.code().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_train_eval_analyze() {
    let (tmp, cfg) = setup();
    let d = tmp.path();
    let cfg = cfg.to_str().unwrap();
    let text = ok(&["gen-data", "--config", cfg, "--out", "data.dpd"], d);
    assert!(text.contains("azure"), "{text}");
    ok(&["gen-data", "--config", cfg, "--out", "raw", "--raw"], d);
    assert!(d.join("raw/names.txt").exists());

    let text = ok(&["train", "--config", cfg, "--data", "data.dpd", "--out", "run"], d);
    assert!(text.contains("doprompt target 1"), "{text}");
    for f in ["model.dpt", "loss.csv", "report.json", "config.txt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let report = json(&d.join("run/report.json"));
    assert_eq!(report["variant"], "doprompt");
    assert_eq!(report["loss_curve_csv_path"], "loss.csv");
    assert_eq!(std::fs::read_to_string(d.join("run/loss.csv")).unwrap().lines().count(), 7);

    let text = ok(
        &["eval", "--config", cfg, "--data", "raw", "--checkpoint", "run/model.dpt", "--out", "ev"],
        d,
    );
    assert!(text.contains("target"), "{text}");
    assert_eq!(json(&d.join("ev/eval.json"))["domains"].as_array().unwrap().len(), 3);

    ok(&["analyze", "--config", cfg, "--mode", "distance", "--out", "dist"], d);
    let dist = json(&d.join("dist/distance.json"));
    assert!(dist["mean_cross_in_ratio"].as_f64().unwrap() > 1.0);
    ok(
        &["analyze", "--config", cfg, "--mode", "distance", "--features", "model", "--checkpoint", "run/model.dpt", "--out", "mdist"],
        d,
    );
    assert!(d.join("mdist/class_dist.csv").exists());

    ok(&["analyze", "--config", cfg, "--mode", "weights", "--checkpoint", "run/model.dpt", "--out", "w"], d);
    let w = json(&d.join("w/weights.json"));
    assert_eq!(w["rows"].as_array().unwrap().len(), 3);
    ok(&["analyze", "--config", cfg, "--mode", "prompt-table", "--checkpoint", "run/model.dpt", "--out", "p"], d);
    let p = std::fs::read_to_string(d.join("p/prompt_table.csv")).unwrap();
    assert!(p.starts_with("target,adapted,azure,orchid\n"), "{p}");
}

#[test]
fn training_twice_writes_identical_files() {
    let (tmp, cfg) = setup();
    let d = tmp.path();
    let cfg = cfg.to_str().unwrap();
    ok(&["train", "--config", cfg, "--seed", "4", "--out", "a"], d);
    ok(&["train", "--config", cfg, "--seed", "4", "--out", "b"], d);
    for f in ["model.dpt", "loss.csv", "report.json", "config.txt"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablate_emits_six_variants_in_order() {
    let (tmp, cfg) = setup();
    let d = tmp.path();
    let cfg = cfg.to_str().unwrap();
    ok(&["ablate", "--config", cfg, "--set", "targets=1", "--set", "seeds=0,1", "--workers", "2"], d);
    let csv = std::fs::read_to_string(d.join("runs/ablate/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        rows,
        ["variant", "doprompt", "erm", "no_adapter", "no_lw", "no_ladapt", "frozen_backbone"]
    );
    assert!(!csv.contains("NaN"), "{csv}");
    let runs = json(&d.join("runs/ablate/ablation.json"));
    assert_eq!(runs["runs"].as_array().unwrap().len(), 12);
    assert!(d.join("runs/ablate/no_lw/t1-s1/report.json").exists());
}

#[test]
fn sweep_length_rows_follow_requested_lengths() {
    let (tmp, cfg) = setup();
    let d = tmp.path();
    let cfg = cfg.to_str().unwrap();
    ok(&["sweep-length", "--config", cfg, "--lengths", "1,3", "--set", "targets=0", "--out", "sw"], d);
    let csv = std::fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    assert!(csv.starts_with("L,azure,avg\n1,"), "{csv}");
    assert!(csv.contains("\n3,"));
    assert!(d.join("sw/L3/t0-s0/model.dpt").exists());
}

#[test]
fn exit_codes_follow_error_kinds() {
    let (tmp, cfg) = setup();
    let d = tmp.path();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&["train", "--config", "missing.cfg"], d), 2);
    assert_eq!(code(&["train", "--config", cfg, "--set", "no_such_key=1"], d), 2);
    assert_eq!(code(&["train", "--config", cfg, "--set", "target_domain=9"], d), 2);
    assert_eq!(code(&["analyze", "--config", cfg, "--mode", "weights"], d), 2);
    assert_eq!(code(&["bogus"], d), 2);

    ok(&["train", "--config", cfg, "--out", "run"], d);
    let bytes = std::fs::read(d.join("run/model.dpt")).unwrap();
    std::fs::write(d.join("cut.dpt"), &bytes[..bytes.len() / 3]).unwrap();
    assert_eq!(code(&["eval", "--config", cfg, "--checkpoint", "cut.dpt"], d), 4);
    std::fs::write(d.join("bad.dpd"), b"nope").unwrap();
    assert_eq!(code(&["eval", "--config", cfg, "--data", "bad.dpd", "--checkpoint", "run/model.dpt"], d), 4);
    assert_eq!(code(&["train", "--config", cfg, "--set", "lr=1e300", "--set", "steps=3"], d), 3);
}
