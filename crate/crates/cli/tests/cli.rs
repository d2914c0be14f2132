use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
embed_dim = 16
layers = 1
heads = 2
ff_dim = 32
max_seq_len = 24

[corpus]
sentences = 300

[pretrain]
epochs = 1

[train]
epochs = 1
batch_size = 16
"#;

fn ddsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddsd")).args(args).env_remove("DDSD_SEED").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ddsd(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&read(p)).unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    base: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    let base = root.join("base");
    ok(&["gen-data", "--out", s(&data), "--seed", "42", "--train", "60", "--eval", "40"]);
    ok(&["pretrain", "--config", s(&config), "--out", s(&base)]);
    Fixture { _tmp: tmp, root, config, data, base }
}

#[test]
fn unknown_subcommand_prints_usage_and_fails() {
    let out = ddsd(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_fails() {
    let out = ddsd(&["gen-data", "--out", "x", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn gen_data_is_reproducible_and_hashed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let names = ["train.jsonl", "eval.jsonl", "manifest.json", "run_config.toml", "provenance.json"];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        ok(&["gen-data", "--out", s(&a), "--seed", "42", "--train", "100", "--eval", "50"]);
        snapshots.push(names.map(|n| read(a.join(n))));
    }
    for (i, name) in names.iter().enumerate() {
        assert_eq!(snapshots[0][i], snapshots[1][i], "{name}");
    }
    let manifest = json(a.join("manifest.json"));
    assert_eq!(manifest["dataset_hash"].as_str().unwrap().len(), 64);
    let train = String::from_utf8(read(a.join("train.jsonl"))).unwrap();
    assert_eq!(train.lines().count(), 100);
    assert_eq!(train.matches("\"label\":\"directed\"").count(), 50);
    let prov = json(a.join("provenance.json"));
    assert_eq!(prov["command"], "gen-data");
    assert!(prov["artifacts"]["train.jsonl"].is_string());
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path, extra: &[&str]| {
        let mut args = vec!["gen-data", "--out", s(dir), "--train", "4", "--eval", "2"];
        args.extend_from_slice(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_ddsd")).args(&args).env("DDSD_SEED", "7").output().unwrap();
        assert!(out.status.success());
        json(dir.join("manifest.json"))["spec"]["seed"].as_u64().unwrap()
    };
    assert_eq!(run(&tmp.path().join("env"), &[]), 7);
    assert_eq!(run(&tmp.path().join("flag"), &["--seed", "3"]), 3);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let out = ddsd(&["gen-data", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
}

#[test]
fn missing_inputs_name_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = ddsd(&["train", "--data", s(&missing), "--base", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));

    let out = ddsd(&["report", "--input", s(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn pipeline_from_data_to_report() {
    let f = fixture();
    assert!(f.base.join("base.ckpt").exists());

    // Flags override the config: TINY says one epoch, the flag asks for two.
    let frozen = f.root.join("frozen");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--base",
        s(&f.base),
        "--out",
        s(&frozen),
        "--modalities",
        "t,a,b",
        "--no-lora",
        "--epochs",
        "2",
        "--train-size",
        "40",
    ]);
    let report = json(frozen.join("train_report.json"));
    assert_eq!(report["spec"]["lora"]["enabled"], false);
    assert_eq!(report["params"]["lora"], 0);
    assert_eq!(report["epoch_loss"].as_array().unwrap().len(), 2);
    let effective = String::from_utf8(read(frozen.join("run_config.toml"))).unwrap();
    assert!(effective.contains("epochs = 2"));
    let prov = json(frozen.join("provenance.json"));
    assert!(prov["artifacts"]["detector.ckpt"].is_string());

    let scored = f.root.join("scored");
    ok(&["eval", "--data", s(&f.data), "--base", s(&f.base), "--detector", s(&frozen), "--out", s(&scored)]);
    let eer = json(scored.join("eer.json"));
    let e = eer["eer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&e));
    assert_eq!(eer["n_directed"].as_u64().unwrap() + eer["n_non_directed"].as_u64().unwrap(), 40);
    let scores = String::from_utf8(read(scored.join("scores.jsonl"))).unwrap();
    assert_eq!(scores.lines().count(), 40);
    assert!(!read(scored.join("det.txt")).is_empty());

    let sweep_cfg = f.root.join("sweep.toml");
    std::fs::write(
        &sweep_cfg,
        format!(
            "{TINY}\n[[ablation]]\nname = \"Uni 1\"\nmodalities = \"t\"\ntrain_size = 40\nseeds = [0]\n\n\
             [[ablation]]\nname = \"Multi 5\"\nmodalities = \"t,a,b\"\nlora = {{ enabled = false }}\ntrain_size = 40\nseeds = [0, 1]\n"
        ),
    )
    .unwrap();
    let swept = f.root.join("swept");
    let out = ok(&[
        "sweep",
        "--config",
        s(&sweep_cfg),
        "--data",
        s(&f.data),
        "--base",
        s(&f.base),
        "--out",
        s(&swept),
        "--jobs",
        "1",
    ]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Uni 1") && table.contains("Multi 5"), "{table}");
    let runs = String::from_utf8(read(swept.join("runs.jsonl"))).unwrap();
    assert_eq!(runs.lines().count(), 3);

    let out = ok(&["report", "--input", s(&swept)]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), table);
    assert_eq!(String::from_utf8(read(swept.join("table.txt"))).unwrap(), table);
}

#[test]
fn training_twice_gives_identical_artifacts() {
    let f = fixture();
    let d = f.root.join("run");
    let names = ["detector.ckpt", "train_report.json", "run_config.toml", "provenance.json"];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        ok(&[
            "train",
            "--config",
            s(&f.config),
            "--data",
            s(&f.data),
            "--base",
            s(&f.base),
            "--out",
            s(&d),
            "--modalities",
            "t,b",
            "--seed",
            "5",
        ]);
        snapshots.push(names.map(|n| read(d.join(n))));
    }
    for (i, name) in names.iter().enumerate() {
        assert_eq!(snapshots[0][i], snapshots[1][i], "{name}");
    }
}

#[test]
fn multi5_requires_lora_disabled() {
    let f = fixture();
    let cfg = f.root.join("bad_row.toml");
    std::fs::write(
        &cfg,
        format!("{TINY}\n[[ablation]]\nname = \"Multi 5\"\nmodalities = \"t,a,b\"\ntrain_size = 40\n"),
    )
    .unwrap();
    let out = ddsd(&[
        "sweep",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data),
        "--base",
        s(&f.base),
        "--out",
        s(&f.root.join("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Multi 5"));
}
