use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sail(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sail"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const RUN: &str = r#"
seed = 5
preset = "tiny"

[[stages]]
stage = "S1"
resize = { fixed = 16 }
steps = 4
peak_lr = 1e-3
min_lr = 1e-4
warmup = 1
schedule = "warmup_cosine"
pack_len = 128
manifest = "data/manifest.jsonl"
"#;

fn dataset(dir: &Path) {
    let o = sail(dir, &["--seed", "1", "--out", "data", "gen-data", "--count", "12", "--size", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn no_arguments_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sail(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(sail(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(sail(dir.path(), &["gen-data", "--count", "many"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = sail(dir.path(), &["--config", "missing.toml", "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());

    fs::write(dir.path().join("bad.ckpt"), b"NOTACKPT").unwrap();
    let o = sail(dir.path(), &["generate", "--checkpoint", "bad.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    dataset(a.path());
    dataset(b.path());
    let read = |d: &Path, p: &str| fs::read(d.join("data").join(p)).unwrap();
    assert_eq!(read(a.path(), "manifest.jsonl"), read(b.path(), "manifest.jsonl"));
    for i in 0..12 {
        let p = format!("images/{i:05}.ppm");
        assert_eq!(read(a.path(), &p), read(b.path(), &p));
    }
    let o = sail(a.path(), &["--seed", "2", "--out", "other", "gen-data", "--count", "12", "--size", "16"]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(a.path().join("other/images/00000.ppm")).unwrap(),
        read(a.path(), "images/00000.ppm")
    );
}

#[test]
fn gen_data_rejects_bad_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = sail(dir.path(), &["gen-data", "--classes", "11"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn training_twice_gives_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    fs::write(dir.path().join("run.toml"), RUN).unwrap();
    let first = sail(dir.path(), &["--config", "run.toml", "--out", "a", "train"]);
    let second = sail(dir.path(), &["--config", "run.toml", "--out", "b", "train"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let loss = |o: &Output| {
        stdout(o)
            .lines()
            .find(|l| l.starts_with("final_loss"))
            .map(str::to_string)
            .unwrap()
    };
    assert_eq!(loss(&first), loss(&second));
    let a = fs::read(dir.path().join("a/model.ckpt")).unwrap();
    let b = fs::read(dir.path().join("b/model.ckpt")).unwrap();
    assert_eq!(&a[..8], b"SAILCKPT");
    assert_eq!(a, b);
    let log = fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    assert!(log.starts_with("step,stage,lr,loss,tokens_seen,wall_time\n"));
    assert_eq!(log.lines().count(), 5);

    let g = sail(dir.path(), &["generate", "--checkpoint", "a/model.ckpt", "--image", "data/images/00000.ppm", "--resize", "16", "--max-new", "4"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
}

#[test]
fn grad_check_passes_on_tiny() {
    let dir = tempfile::tempdir().unwrap();
    let o = sail(dir.path(), &["grad-check", "--preset", "tiny"]);
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("max_rel_error"));
}

#[test]
fn pack_inspect_writes_square_masks() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let o = sail(
        dir.path(),
        &["--out", "packs", "pack-inspect", "--manifest", "data/manifest.jsonl", "--resize", "16", "--pack-len", "64", "--max-packs", "1"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let allow = fs::read_to_string(dir.path().join("packs/pack_000_allow.csv")).unwrap();
    let rows: Vec<Vec<&str>> = allow.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 64);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 64);
        assert_eq!(r[i], "1");
    }
    let pos = fs::read_to_string(dir.path().join("packs/pack_000_positions.csv")).unwrap();
    assert_eq!(pos.lines().count(), 65);
}

#[test]
fn probe_and_retrieve_print_json() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let m = "data/manifest.jsonl";
    let o = sail(dir.path(), &["probe", "--preset", "tiny", "--train", m, "--test", m, "--epochs", "1", "--resize", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["classes"], 4);
    let o = sail(dir.path(), &["retrieve", "--preset", "tiny", "--manifest", m, "--limit", "3", "--resize", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["result"]["trials"], 3);
}
