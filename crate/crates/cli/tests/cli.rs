use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 4
output_dir = "unused"
iterations = 1

[dataset.blobs]
train_size = 120
test_size = 60

[noise]
target_rate = 0.3

[model]
preset = "mlp"

[contrastive]
epochs = 2
batch_size = 32

[train]
warmup_epochs = 2
batch_size = 32

[[stage_plan.schedule]]
iteration_epochs = 3
stage_epochs = [1, 3]
"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisyrefine"))
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prepare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&cli(&["prepare", "--config", &cfg, "--output", a.to_str().unwrap()]));
    ok(&cli(&["prepare", "--config", &cfg, "--output", b.to_str().unwrap()]));
    let la = fs::read(a.join("noise_ledger.tsv")).unwrap();
    assert_eq!(la, fs::read(b.join("noise_ledger.tsv")).unwrap());
    assert_eq!(fs::read_to_string(a.join("config.toml")).unwrap(), CONFIG);
    assert!(a.join("effective.toml").exists());
    assert!(a.join("noise_report.csv").exists());
}

#[test]
fn zero_rate_flips_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("target_rate = 0.3", "target_rate = 0.0"));
    let out = dir.path().join("o");
    ok(&cli(&["prepare", "--config", &cfg, "--output", out.to_str().unwrap()]));
    let ledger = fs::read_to_string(out.join("noise_ledger.tsv")).unwrap();
    let rows: Vec<_> = ledger.lines().skip(1).collect();
    assert_eq!(rows.len(), 120);
    for row in rows {
        let f: Vec<_> = row.split('\t').collect();
        assert_eq!(f[1], f[2], "{row}");
    }
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{CONFIG}\nitterations = 2\n"));
    let out = cli(&["prepare", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["prepare", "--config", "/nonexistent/run.toml"]).status.code(), Some(1));
}

#[test]
fn run_without_ledger_says_what_to_do() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = cli(&["run", "--config", &cfg, "--output", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("noisyrefine prepare"), "{err}");
}

#[test]
fn run_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("iterations = 1", "iterations = 2"));
    let full = dir.path().join("full");
    let full_s = full.to_str().unwrap();
    ok(&cli(&["prepare", "--config", &cfg, "--output", full_s]));
    ok(&cli(&["run", "--config", &cfg, "--output", full_s]));
    for name in ["warmup.ckpt", "iter1.ckpt", "iter2.ckpt", "iter2_audit.csv", "epochs.csv", "quality.csv", "metrics.csv"] {
        assert!(full.join(name).exists(), "{name} missing");
    }

    // Resuming after the first iteration reproduces the final metrics.
    let resumed = dir.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    fs::copy(full.join("noise_ledger.tsv"), resumed.join("noise_ledger.tsv")).unwrap();
    ok(&cli(&[
        "run",
        "--config",
        &cfg,
        "--output",
        resumed.to_str().unwrap(),
        "--resume",
        full.join("iter1.ckpt").to_str().unwrap(),
    ]));
    for name in ["metrics.csv", "quality.csv", "epochs.csv"] {
        assert_eq!(fs::read(full.join(name)).unwrap(), fs::read(resumed.join(name)).unwrap(), "{name}");
    }

    let ckpt = full.join("iter2.ckpt");
    let r1 = dir.path().join("e1.csv");
    let r2 = dir.path().join("e2.csv");
    for r in [&r1, &r2] {
        ok(&cli(&[
            "evaluate",
            "--config",
            &cfg,
            "--output",
            full_s,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--report",
            r.to_str().unwrap(),
        ]));
    }
    let text = fs::read_to_string(&r1).unwrap();
    assert_eq!(text, fs::read_to_string(&r2).unwrap());
    assert!(text.contains("refine@iter2"), "{text}");

    // A checkpoint whose model does not match the config is refused.
    let other = write_config(
        &dir.path().join("full"),
        &CONFIG.replace("preset = \"mlp\"", "preset = \"tiny\""),
    );
    let out = cli(&["evaluate", "--config", &other, "--output", full_s, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_iterations_stop_after_warmup() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("o");
    let out_s = out.to_str().unwrap();
    ok(&cli(&["prepare", "--config", &cfg, "--output", out_s]));
    ok(&cli(&["run", "--config", &cfg, "--output", out_s, "--iterations", "0"]));
    assert!(out.join("warmup.ckpt").exists());
    assert!(!out.join("iter1.ckpt").exists());
}
