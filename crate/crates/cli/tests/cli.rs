use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_hrcloud");

fn hrcloud(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("HRCLOUD_RUN_ROOT", root.join("runs"))
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small network on 32-pixel tiles; runs in well under a second per step.
const TINY: &str = r#"
max_steps = 3
[model]
tile_size = 32
[model.backbone]
base_width = 4
stem_width = 8
bottleneck_planes = 4
bottleneck_units = 1
basic_units = 1
[model.decoder]
head_channels = 8
[optimizer]
epochs = 2
batch_size = 2
seed = 5
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = hrcloud(dir.path(), &["synth", "--out", "data", "--train", "2", "--test", "1", "--size", "40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn write_config(dir: &Path, name: &str, run_name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(
        &p,
        format!("{TINY}\n[paths]\nmanifest = \"data/manifest.jsonl\"\nrun_name = \"{run_name}\"\n{extra}"),
    )
    .unwrap();
    p
}

fn train(dir: &Path, config: &Path) -> PathBuf {
    let o = hrcloud(dir, &["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("runs")
}

#[test]
fn help_documents_palette_and_exit_codes() {
    let o = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("false positive red") && text.contains("false negative blue"));
    assert!(text.contains("1 validation error"));
    let o = Command::new(BIN).arg("frobnicate").output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn malformed_config_exits_1_without_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[optimizer\nlearning_rate = ").unwrap();
    let o = hrcloud(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("runs").exists());

    fs::write(dir.path().join("typo.toml"), "[optimizer]\nlearning_rat = 0.1\n").unwrap();
    let o = hrcloud(dir.path(), &["train", "--config", "typo.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    fs::write(dir.path().join("range.toml"), "[loss]\ntau = 3.0\n").unwrap();
    let o = hrcloud(dir.path(), &["train", "--config", "range.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("tau"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn missing_manifest_data_exits_3_without_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.jsonl"), "{\"image\": \"a.png\", \"mask\": \"b.png\", \"split\": \"train\"}\n").unwrap();
    fs::write(dir.path().join("c.toml"), "[paths]\nmanifest = \"m.jsonl\"\n").unwrap();
    let o = hrcloud(dir.path(), &["train", "--config", "c.toml"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("a.png") && stderr(&o).contains("b.png"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn train_writes_run_and_echoed_config_reproduces_it() {
    let dir = setup();
    let cfg = write_config(dir.path(), "run.toml", "first", "");
    let runs = train(dir.path(), &cfg);
    let run = runs.join("first");
    for f in ["config.toml", "log.jsonl", "summary.json", "checkpoints/last.safetensors"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    let steps: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["kind"] == "step")
        .collect();
    assert_eq!(steps.len(), 3);
    for key in ["step", "l_ce", "l_ce_aug", "total", "masked_fraction"] {
        assert!(steps[0].get(key).is_some(), "step record lacks {key}");
    }

    // Feed the echoed config back under another root: identical log.
    let other = tempfile::tempdir().unwrap();
    let echoed = other.path().join("echo.toml");
    fs::copy(run.join("config.toml"), &echoed).unwrap();
    let o = hrcloud(other.path(), &["train", "--config", echoed.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = fs::read_to_string(other.path().join("runs/first/log.jsonl")).unwrap();
    assert_eq!(again, log);

    // Same run name again is refused.
    let o = hrcloud(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn lambda_grid_point_runs_from_config() {
    let dir = setup();
    let cfg = write_config(dir.path(), "l.toml", "grid", "[loss]\nlambda1 = 0.25\nlambda2 = 0.25\n");
    let runs = train(dir.path(), &cfg);
    let echoed = fs::read_to_string(runs.join("grid/config.toml")).unwrap();
    assert!(echoed.contains("lambda1 = 0.25") && echoed.contains("lambda2 = 0.25"));
}

#[test]
fn resume_continues_the_log() {
    let dir = setup();
    let cfg = write_config(dir.path(), "r.toml", "res", "");
    train(dir.path(), &cfg);
    let longer = fs::read_to_string(&cfg).unwrap().replace("max_steps = 3", "max_steps = 5");
    fs::write(&cfg, &longer).unwrap();
    let o = hrcloud(dir.path(), &["train", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resumed = fs::read_to_string(dir.path().join("runs/res/log.jsonl")).unwrap();

    let straight = write_config(dir.path(), "s.toml", "straight", "");
    fs::write(&straight, longer.replace("run_name = \"res\"", "run_name = \"straight\"")).unwrap();
    train(dir.path(), &straight);
    let uninterrupted = fs::read_to_string(dir.path().join("runs/straight/log.jsonl")).unwrap();
    assert_eq!(resumed, uninterrupted);

    let changed = longer.replace("seed = 5", "seed = 6");
    fs::write(&cfg, changed).unwrap();
    let o = hrcloud(dir.path(), &["train", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("optimizer.seed"), "{}", stderr(&o));
}

#[test]
fn predict_is_deterministic_and_scene_sized() {
    let dir = setup();
    let cfg = write_config(dir.path(), "p.toml", "pred", "");
    let runs = train(dir.path(), &cfg);
    let ck = runs.join("pred/checkpoints/last.safetensors");
    let ck = ck.to_str().unwrap();

    // A 20x20 scene is smaller than one 32-pixel tile.
    let small = image::RgbImage::from_fn(20, 20, |x, y| image::Rgb([(x * 12) as u8, (y * 12) as u8, 200]));
    small.save(dir.path().join("small.png")).unwrap();
    for out in ["a", "b"] {
        let o = hrcloud(
            dir.path(),
            &["predict", "--checkpoint", ck, "--input", "data/test000.png", "small.png", "--out", out],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["test000_prob.png", "test000_mask.png", "small_prob.png", "small_mask.png"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    let prob = image::open(dir.path().join("a/test000_prob.png")).unwrap();
    assert_eq!((prob.width(), prob.height()), (40, 40));
    let small_prob = image::open(dir.path().join("a/small_prob.png")).unwrap();
    assert_eq!((small_prob.width(), small_prob.height()), (20, 20));
    let mask = image::open(dir.path().join("a/test000_mask.png")).unwrap().to_luma8();
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));

    let mismatch = write_config(dir.path(), "m.toml", "other", "");
    let text = fs::read_to_string(&mismatch).unwrap().replace("base_width = 4", "base_width = 6");
    fs::write(&mismatch, text).unwrap();
    let o = hrcloud(
        dir.path(),
        &["predict", "--checkpoint", ck, "--input", "small.png", "--out", "c", "--config", "m.toml"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("model.backbone.base_width"), "{}", stderr(&o));
    assert!(!dir.path().join("c").exists());
}

#[test]
fn evaluate_is_deterministic_and_echoes_constants() {
    let dir = setup();
    let cfg = write_config(dir.path(), "e.toml", "eval", "");
    let runs = train(dir.path(), &cfg);
    let ck = runs.join("eval/checkpoints/last.safetensors");
    let ck = ck.to_str().unwrap();
    for out in ["r1", "r2"] {
        let o = hrcloud(
            dir.path(),
            &["evaluate", "--checkpoint", ck, "--manifest", "data/manifest.jsonl", "--out", out],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read_to_string(dir.path().join("r1/report.json")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("r2/report.json")).unwrap());
    let report: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(report["config"]["beta2"], 1.0);
    assert_eq!(report["config"]["alpha"], 0.5);
    assert_eq!(report["config"]["sigma"], 5.0);
    let table = fs::read_to_string(dir.path().join("r1/report.txt")).unwrap();
    assert!(table.starts_with("beta^2=1 sigma=5"));

    fs::remove_file(dir.path().join("data/test000_mask.png")).unwrap();
    let o = hrcloud(
        dir.path(),
        &["evaluate", "--checkpoint", ck, "--manifest", "data/manifest.jsonl", "--out", "r3"],
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("test000_mask.png"));
    assert!(!dir.path().join("r3").exists());
}

#[test]
fn visualize_counts_match_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let label = image::GrayImage::from_fn(9, 7, |x, y| image::Luma([if (x + y) % 3 == 0 { 255 } else { 0 }]));
    let pred = image::GrayImage::from_fn(9, 7, |x, _| image::Luma([if x < 4 { 255 } else { 0 }]));
    label.save(dir.path().join("label.png")).unwrap();
    pred.save(dir.path().join("pred.png")).unwrap();
    let o = hrcloud(dir.path(), &["visualize", "--pred", "pred.png", "--label", "label.png", "--out", "ov.png"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let counts: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (p, t) in pred.pixels().zip(label.pixels()) {
        match (p.0[0] > 0, t.0[0] > 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    assert_eq!(counts["tp"], tp);
    assert_eq!(counts["tn"], tn);
    assert_eq!(counts["fp"], fp);
    assert_eq!(counts["fn"], fn_);
    let ov = image::open(dir.path().join("ov.png")).unwrap().to_rgb8();
    let red = ov.pixels().filter(|p| p.0 == [255, 0, 0]).count();
    let blue = ov.pixels().filter(|p| p.0 == [0, 0, 255]).count();
    assert_eq!((red, blue), (fp, fn_));

    let small = image::GrayImage::new(3, 3);
    small.save(dir.path().join("small.png")).unwrap();
    let o = hrcloud(dir.path(), &["visualize", "--pred", "small.png", "--label", "label.png", "--out", "x.png"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn tile_then_stitch_reproduces_scene() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::RgbImage::from_fn(75, 50, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, ((x * y) % 256) as u8]));
    img.save(dir.path().join("scene.png")).unwrap();
    let o = hrcloud(dir.path(), &["tile", "--input", "scene.png", "--out", "t", "--tile-size", "32"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("\"tiles\":6"));
    let o = hrcloud(dir.path(), &["stitch", "--tiles", "t", "--out", "back.png"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let back = image::open(dir.path().join("back.png")).unwrap().to_rgb8();
    assert_eq!(back, img);
}

#[test]
fn desk_training_on_synthetic_tiles_overfits() {
    let dir = tempfile::tempdir().unwrap();
    let o = hrcloud(dir.path(), &["synth", "--out", "data", "--train", "4", "--test", "0", "--size", "64", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(
        dir.path().join("desk.toml"),
        r#"max_steps = 300
[paths]
manifest = "data/manifest.jsonl"
run_name = "desk"
[model]
tile_size = 64
[model.backbone]
base_width = 8
stem_width = 16
bottleneck_planes = 8
[optimizer]
epochs = 300
batch_size = 4
"#,
    )
    .unwrap();
    let o = hrcloud(dir.path(), &["train", "--config", "desk.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["steps"], 300);
    let e_ma = summary["train"]["e_ma"].as_f64().unwrap();
    assert!(e_ma < 0.05, "train e_ma {e_ma}");
}
