use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[generate]
n_images = 10
size = 64

[sampling]
n_background = 200
n_foreground_per_class = 100

[model]
patch_size = 16

[model.encoder]
widths = [4, 4, 6, 6, 8]
embed_dim = 8

[model.decoder]
patch_hidden = [16, 16]
image_hidden = [16]

[train]
iterations = 3
batch_images = 2
points_per_image = 64
val_every = 0
"#;

fn swipe(args: &[&str]) -> Output {
    swipe_env(args, &[])
}

fn swipe_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_swipe"));
    cmd.args(args).env("RUST_LOG", "warn");
    for var in ["SWIPE_CONFIG", "SWIPE_PRESET", "SWIPE_CORPUS", "SWIPE_OUT", "SWIPE_SEED", "SWIPE_ITERATIONS"] {
        cmd.env_remove(var);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny config plus a sampled 10-image corpus.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    corpus: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let corpus = root.join("corpus");
        ok(&swipe(&["generate", "--config", s(&config), "--out", s(&corpus)]));
        ok(&swipe(&["sample", "--config", s(&config), "--corpus", s(&corpus)]));
        Self {
            _dir: dir,
            root,
            config,
            corpus,
        }
    }

    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.root.join(name);
        let mut args = vec!["train", "--config", s(&self.config), "--corpus", s(&self.corpus), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&swipe(&args));
        out
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_splits_and_refuses_non_empty_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&swipe(&["generate", "--out", s(&out), "--n", "10", "--size", "64"]));
    let manifest = json(&out.join("manifest.json"));
    let len = |k: &str| manifest["splits"][k].as_array().unwrap().len();
    assert_eq!((len("train"), len("val"), len("test")), (6, 2, 2));
    assert_eq!(manifest["height"], 64);
    assert!(out.join("generate.toml").is_file());

    let again = swipe(&["generate", "--out", s(&out), "--n", "10", "--size", "64"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&swipe(&["generate", "--out", s(&out), "--n", "10", "--size", "64", "--force"]));
}

#[test]
fn generate_defaults_to_two_hundred_images_at_96() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&swipe(&["generate", "--out", s(&out)]));
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 200);
    assert_eq!((manifest["height"].as_u64(), manifest["width"].as_u64()), (Some(96), Some(96)));
}

#[test]
fn invalid_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    assert_eq!(swipe(&["generate", "--out", s(&out), "--n", "2"]).status.code(), Some(2));
    assert_eq!(swipe(&["generate", "--out", s(&out), "--n", "many"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "typo = 1\n").unwrap();
    assert_eq!(swipe(&["generate", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_two_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = swipe(&[
        "infer",
        "--checkpoint",
        s(&dir.path().join("nope.bin")),
        "--image",
        s(&dir.path().join("img.png")),
        "--out",
        s(&dir.path().join("mask.png")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.bin"));
}

#[test]
fn train_infer_eval_round() {
    let fx = Fixture::new();

    let full = fx.train("full", &["--seed", "1", "--deterministic"]);
    let again = fx.train("again", &["--seed", "1", "--deterministic"]);
    let metrics = fs::read(full.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(again.join("metrics.csv")).unwrap());
    let header = String::from_utf8_lossy(&metrics).lines().next().unwrap().to_string();
    assert_eq!(header, "iteration,L_total,L_PI_patch,L_PI_image,L_SPO,reg");

    // The echoed configuration alone reproduces the run.
    let echoed = full.join("resolved.toml");
    let replay = fx.root.join("replay");
    ok(&swipe(&["train", "--config", s(&echoed), "--out", s(&replay)]));
    assert_eq!(metrics, fs::read(replay.join("metrics.csv")).unwrap());

    let off = fx.train("spo_off", &["--ablate", "spo=off"]);
    let meta_full = json(&full.join("checkpoint.json"));
    let meta_off = json(&off.join("checkpoint.json"));
    assert_eq!(meta_off["train"]["ablation"]["spo"], false);
    assert_eq!(meta_full["train"]["ablation"]["spo"], true);
    assert_eq!(meta_off["param_count"], meta_full["param_count"]);

    let quarter = fx.train("quarter", &["--annotation-fraction", "0.25"]);
    let summary = json(&quarter.join("summary.json"));
    assert_eq!(summary["train_images"].as_array().unwrap().len(), 2);
    assert_eq!(summary["annotation_fraction"], 0.25);

    let ck = full.join("checkpoint.bin");
    let image = fx.corpus.join("images/0000.png");
    let mask = fx.root.join("pred/mask.png");
    ok(&swipe(&[
        "infer",
        "--checkpoint",
        s(&ck),
        "--image",
        s(&image),
        "--out",
        s(&mask),
        "--out-size",
        "128",
        "--mode",
        "mise",
        "--compare-dense",
    ]));
    let png = image::open(&mask).unwrap();
    assert_eq!((png.height(), png.width()), (128, 128));
    let side = json(&mask.with_extension("json"));
    assert_eq!(side["target_height"], 128);
    assert_eq!(side["refinement"], "mise");
    assert!(side["dense_agreement"].as_f64().unwrap() >= 0.0);

    let csv_a = fx.root.join("eval/a.csv");
    let csv_b = fx.root.join("eval/b.csv");
    for out in [&csv_a, &csv_b] {
        ok(&swipe(&[
            "eval",
            "--checkpoint",
            s(&ck),
            "--corpus",
            s(&fx.corpus),
            "--split",
            "test",
            "--out",
            s(out),
        ]));
    }
    let text = fs::read_to_string(&csv_a).unwrap();
    assert_eq!(text, fs::read_to_string(&csv_b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "image_id,split,height,width,dice,evaluations");
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert!(lines[3].starts_with("mean,test,"));

    let bad_split = swipe(&["eval", "--checkpoint", s(&ck), "--corpus", s(&fx.corpus), "--split", "dev", "--out", s(&csv_a)]);
    assert_eq!(bad_split.status.code(), Some(2));
}

#[test]
fn environment_overrides_file_and_flags_override_environment() {
    let fx = Fixture::new();
    let out = fx.root.join("env");
    let args = ["train", "--config", s(&fx.config), "--corpus", s(&fx.corpus), "--out", s(&out)];
    ok(&swipe_env(&args, &[("SWIPE_ITERATIONS", "2")]));
    assert_eq!(json(&out.join("summary.json"))["steps"], 2);
    let mut with_flag = args.to_vec();
    with_flag.extend_from_slice(&["--iterations", "1"]);
    ok(&swipe_env(&with_flag, &[("SWIPE_ITERATIONS", "2")]));
    assert_eq!(json(&out.join("summary.json"))["steps"], 1);
}

#[test]
fn train_without_points_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    ok(&swipe(&["generate", "--out", s(&corpus), "--n", "10", "--size", "64"]));
    let out = swipe(&["train", "--corpus", s(&corpus), "--out", s(&dir.path().join("r")), "--iterations", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("swipe sample"));
}

#[test]
fn ablate_runs_grid_and_resumes() {
    let fx = Fixture::new();
    let out = fx.root.join("sweep");
    let args = [
        "ablate",
        "--config",
        s(&fx.config),
        "--corpus",
        s(&fx.corpus),
        "--out",
        s(&out),
        "--grid",
        "spo=on,off",
        "--seeds",
        "0,1",
        "--iterations",
        "2",
    ];
    ok(&swipe(&args));
    let cells = fs::read_to_string(out.join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 4);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "variant,runs,seeds,mean_test_dice,std_test_dice,mean_val_dice");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("spo=on,2,0 1,"));

    // Drop one cell's result: the rerun trains only that cell.
    let dirs: Vec<PathBuf> = fs::read_dir(out.join("cells")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 4);
    let stamp = |d: &Path| fs::metadata(d.join("result.json")).unwrap().modified().unwrap();
    let before: Vec<_> = dirs.iter().map(|d| stamp(d)).collect();
    fs::remove_file(dirs[0].join("result.json")).unwrap();
    ok(&swipe(&args));
    for (d, t) in dirs.iter().zip(&before).skip(1) {
        assert_eq!(stamp(d), *t);
    }
    assert!(dirs[0].join("result.json").is_file());
    assert_eq!(fs::read_to_string(out.join("cells.csv")).unwrap(), cells);
}

#[test]
fn ablate_plan_lists_spo_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = swipe(&[
        "ablate",
        "--out",
        s(&dir.path().join("s")),
        "--grid",
        "occurrence=4,8",
        "--grid",
        "connectivity=4,8",
        "--seeds",
        "0",
        "--plan",
    ]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for row in ["occurrence=4,connectivity=4", "occurrence=4,connectivity=8", "occurrence=8,connectivity=4"] {
        assert!(text.contains(row), "{text}");
    }
}
