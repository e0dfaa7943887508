//! `hrcloud` command-line tool.
//!
//! Exit codes: 0 success, 1 validation failure (arguments, config, checkpoint
//! compatibility), 2 runtime failure, 3 data failure (manifest, missing or unreadable
//! inputs). Validation and data loading finish before anything is written.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hrcloud::checkpoint::{config_fingerprint, Checkpoint};
use hrcloud::config::RunConfig;
use hrcloud::inference::{evaluate_scenes, predict_scene};
use hrcloud::io::{
    confusion_overlay, load_manifest, load_mask, load_scene, save_mask, save_probability, save_rgb8, save_scene,
    Split,
};
use hrcloud::synthetic::write_synthetic_dataset;
use hrcloud::tiling::{crop, plan_grid, stitch, TileGrid};
use hrcloud::trainer::{lambda_sweep, tile_samples, LogRecord, Trainer};
use hrcloud::Error;

/// Environment variable naming the directory that holds run directories (default `runs`).
const RUN_ROOT_ENV: &str = "HRCLOUD_RUN_ROOT";

const AFTER_HELP: &str = "\
Overlay palette (visualize): true positive white, true negative black, \
false positive red, false negative blue.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 data error.
Run directories are created under $HRCLOUD_RUN_ROOT (default ./runs).";

#[derive(Parser)]
#[command(name = "hrcloud", version, about = "Cloud detection: train, predict, evaluate, tile and visualize", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config; writes checkpoints, log.jsonl and the echoed config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Write `<stem>_prob.png` (round(255 p)) and `<stem>_mask.png` (0/255) per input scene.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose model section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score stitched predictions against a manifest split; writes report.json and report.txt.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Crop a scene into reflection-padded tiles plus grid.json.
    Tile {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = hrcloud::tiling::DEFAULT_TILE_SIZE)]
        tile_size: usize,
    },
    /// Reassemble a directory written by `tile` into the original scene.
    Stitch {
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Colour a binary prediction against a label (palette in --help).
    Visualize {
        /// Prediction image; pixels >= 128 count as cloud.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        label: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score one model per (lambda1, lambda2) in the config's sweep grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a seeded synthetic dataset and its manifest.jsonl.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        train: usize,
        #[arg(long, default_value_t = 1)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) | Failure::Data(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Validation(msg),
            Error::Format { .. } | Error::MissingFiles(_) | Error::Image(_) => Failure::Data(msg),
            _ => Failure::Runtime(msg),
        }
    }
}

fn data(e: Error) -> Failure {
    match e {
        Error::Io(_) | Error::Shape(_) | Error::InvalidArgument(_) => Failure::Data(e.to_string()),
        e => e.into(),
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CmdResult = Result<(), Failure>;

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Dotted paths of leaves that differ between two JSON documents.
fn diff_fields(a: &Value, b: &Value, prefix: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                diff_fields(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), &path, out);
            }
        }
        _ if a != b => out.push(prefix.to_string()),
        _ => {}
    }
}

fn divergent_fields(label: &str, a: &impl serde::Serialize, b: &impl serde::Serialize) -> Vec<String> {
    let mut out = Vec::new();
    diff_fields(
        &serde_json::to_value(a).expect("serialisable"),
        &serde_json::to_value(b).expect("serialisable"),
        label,
        &mut out,
    );
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scene".into(), |s| s.to_string_lossy().into_owned())
}

fn metrics_json(r: &hrcloud::metrics::EvalReport) -> Value {
    json!({"e_ma": r.mean_mae, "f_beta_w": r.mean_fbeta, "s_measure": r.mean_s_measure, "scenes": r.scene_count})
}

fn cmd_train(config_path: &Path, resume: bool) -> CmdResult {
    let mut cfg = RunConfig::load(config_path)?;
    let manifest_path = cfg
        .paths
        .manifest
        .clone()
        .ok_or_else(|| Failure::Validation("paths.manifest is required for training".into()))?;
    let manifest_path = std::path::absolute(&manifest_path).map_err(runtime)?;
    cfg.paths.manifest = Some(manifest_path.clone());
    let tc = cfg.train_config();
    let run_name = cfg
        .paths
        .run_name
        .clone()
        .unwrap_or_else(|| format!("run-{}", &config_fingerprint(&tc)[..12]));
    let run_dir = run_root().join(run_name);
    let ckpt_dir = run_dir.join("checkpoints");
    let last = ckpt_dir.join("last.safetensors");

    let manifest = load_manifest(&manifest_path).map_err(data)?;
    let train_scenes = manifest.load_split(Split::Train).map_err(data)?;
    if train_scenes.is_empty() {
        return Err(Failure::Data(format!("{} has no train scenes", manifest_path.display())));
    }
    let test_scenes = manifest.load_split(Split::Test).map_err(data)?;
    let samples = tile_samples(&train_scenes, tc.model.tile_size).map_err(data)?;

    let mut trainer = if resume {
        let ck = Checkpoint::load(&last)
            .map_err(|e| Failure::Validation(format!("cannot resume from {}: {e}", last.display())))?;
        // The step budget may grow between sessions; everything else must match.
        let mut budgeted = ck.config.clone();
        budgeted.max_steps = tc.max_steps;
        let diffs = divergent_fields("", &budgeted, &tc);
        if !diffs.is_empty() {
            return Err(Failure::Validation(format!(
                "checkpoint config differs from {} at: {}",
                config_path.display(),
                diffs.join(", ")
            )));
        }
        let mut t = Trainer::from_checkpoint(ck)?;
        t.config.max_steps = tc.max_steps;
        t
    } else {
        if run_dir.read_dir().is_ok_and(|mut d| d.next().is_some()) {
            return Err(Failure::Validation(format!(
                "run directory {} already exists; pass --resume or choose another paths.run_name",
                run_dir.display()
            )));
        }
        Trainer::new(tc)?
    };

    create_dir(&ckpt_dir)?;
    write_file(&run_dir.join("config.toml"), cfg.to_toml())?;
    let log_path = run_dir.join("log.jsonl");
    let mut log_file = File::options()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(runtime)?;
    eprintln!("run directory {}", run_dir.display());
    eprintln!("{}", cfg.to_toml());

    trainer.fit(&samples, &test_scenes, &mut |rec, tr| {
        writeln!(log_file, "{}", rec.to_json_line()).map_err(Error::Io)?;
        if let LogRecord::Epoch { epoch, .. } = rec {
            let ck = tr.checkpoint();
            ck.save(&ckpt_dir.join(format!("epoch-{epoch:04}.safetensors")))?;
            ck.save(&last)?;
            eprintln!("{}", rec.to_json_line());
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&last)?;

    let train_report = trainer.evaluate(&train_scenes)?;
    let mut summary = json!({
        "steps": trainer.progress.step,
        "epochs_completed": trainer.progress.epoch,
        "train": metrics_json(&train_report),
    });
    if !test_scenes.is_empty() {
        summary["test"] = metrics_json(&trainer.evaluate(&test_scenes)?);
    }
    let text = serde_json::to_string_pretty(&summary).expect("plain json");
    write_file(&run_dir.join("summary.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_predict(
    checkpoint: &Path,
    inputs: &[PathBuf],
    out: &Path,
    config: Option<&Path>,
    batch_size: Option<usize>,
) -> CmdResult {
    let ck = Checkpoint::load(checkpoint).map_err(|e| Failure::Validation(e.to_string()))?;
    if let Some(path) = config {
        let cfg = RunConfig::load(path)?;
        let diffs = divergent_fields("model", &ck.config.model, &cfg.model);
        if !diffs.is_empty() {
            return Err(Failure::Validation(format!(
                "checkpoint and {} disagree at: {}",
                path.display(),
                diffs.join(", ")
            )));
        }
    }
    let batch = batch_size.unwrap_or(ck.config.optimizer.batch_size);
    if batch == 0 {
        return Err(Failure::Validation("--batch-size must be at least 1".into()));
    }
    let scenes = inputs
        .iter()
        .map(|p| load_scene(p, &file_stem(p)).map_err(data))
        .collect::<Result<Vec<_>, _>>()?;
    let net = ck.model()?;
    create_dir(out)?;
    for scene in &scenes {
        let pred = predict_scene(&net, &ck.store, scene, batch)?;
        let prob = out.join(format!("{}_prob.png", scene.scene_id));
        let mask = out.join(format!("{}_mask.png", scene.scene_id));
        save_probability(&prob, &pred.cloud)?;
        save_mask(&mask, &pred.binary_mask())?;
        println!("{}", json!({"scene": scene.scene_id, "probability": prob, "mask": mask}));
    }
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, manifest: &Path, out: &Path, split: Split) -> CmdResult {
    let ck = Checkpoint::load(checkpoint).map_err(|e| Failure::Validation(e.to_string()))?;
    let m = load_manifest(manifest).map_err(data)?;
    let scenes = m.load_split(split).map_err(data)?;
    if scenes.is_empty() {
        return Err(Failure::Data(format!("{} has no scenes in the requested split", manifest.display())));
    }
    let net = ck.model()?;
    let report = evaluate_scenes(
        &net,
        &ck.store,
        &scenes,
        ck.config.optimizer.batch_size,
        &ck.config.metrics,
    )?;
    create_dir(out)?;
    write_file(
        &out.join("report.json"),
        serde_json::to_string_pretty(&report).expect("plain json"),
    )?;
    let table = report.to_table();
    write_file(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TileIndex {
    scene_id: String,
    grid: TileGrid,
}

fn tile_name(row: usize, col: usize) -> String {
    format!("tile_r{row:03}_c{col:03}.png")
}

fn cmd_tile(input: &Path, out: &Path, tile_size: usize) -> CmdResult {
    let scene = load_scene(input, &file_stem(input)).map_err(data)?;
    let grid = plan_grid(scene.pixels.height(), scene.pixels.width(), tile_size)?;
    let tiles = crop(&scene.pixels, &grid)?;
    create_dir(out)?;
    for (i, t) in tiles.iter().enumerate() {
        save_scene(&out.join(tile_name(i / grid.cols, i % grid.cols)), t)?;
    }
    let index = TileIndex {
        scene_id: scene.scene_id,
        grid,
    };
    write_file(
        &out.join("grid.json"),
        serde_json::to_string_pretty(&index).expect("plain json"),
    )?;
    println!("{}", json!({"tiles": tiles.len(), "rows": grid.rows, "cols": grid.cols}));
    Ok(())
}

fn cmd_stitch(dir: &Path, out: &Path) -> CmdResult {
    let index_path = dir.join("grid.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Failure::Data(format!("{}: {e}", index_path.display())))?;
    let index: TileIndex =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", index_path.display())))?;
    let grid = index.grid;
    let mut tiles = Vec::with_capacity(grid.tile_count());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            tiles.push(load_scene(&dir.join(tile_name(r, c)), &index.scene_id).map_err(data)?.pixels);
        }
    }
    let scene = stitch(&tiles, &grid).map_err(data)?;
    save_scene(out, &scene)?;
    Ok(())
}

fn cmd_visualize(pred: &Path, label: &Path, out: &Path) -> CmdResult {
    let p = load_mask(pred, "prediction").map_err(data)?;
    let t = load_mask(label, "label").map_err(data)?;
    let (overlay, counts) = confusion_overlay(&p.labels, &t.labels).map_err(data)?;
    save_rgb8(out, &overlay)?;
    println!("{}", json!({"tp": counts.tp, "tn": counts.tn, "fp": counts.fp, "fn": counts.fn_}));
    Ok(())
}

fn cmd_sweep(config_path: &Path) -> CmdResult {
    let cfg = RunConfig::load(config_path)?;
    let manifest_path = cfg
        .paths
        .manifest
        .clone()
        .ok_or_else(|| Failure::Validation("paths.manifest is required for a sweep".into()))?;
    let tc = cfg.train_config();
    let manifest = load_manifest(&manifest_path).map_err(data)?;
    let train_scenes = manifest.load_split(Split::Train).map_err(data)?;
    let test_scenes = manifest.load_split(Split::Test).map_err(data)?;
    if train_scenes.is_empty() || test_scenes.is_empty() {
        return Err(Failure::Data("a sweep needs both train and test scenes".into()));
    }
    let samples = tile_samples(&train_scenes, tc.model.tile_size).map_err(data)?;
    let run_dir = run_root().join(
        cfg.paths
            .run_name
            .clone()
            .unwrap_or_else(|| format!("sweep-{}", &config_fingerprint(&tc)[..12])),
    );
    if run_dir.read_dir().is_ok_and(|mut d| d.next().is_some()) {
        return Err(Failure::Validation(format!("run directory {} already exists", run_dir.display())));
    }
    create_dir(&run_dir)?;
    write_file(&run_dir.join("config.toml"), cfg.to_toml())?;
    let mut log = File::create(run_dir.join("sweep.jsonl")).map_err(runtime)?;
    lambda_sweep(&tc, &cfg.sweep.lambdas, &samples, &test_scenes, &mut |p| {
        let line = serde_json::to_string(p).expect("plain json");
        writeln!(log, "{line}").map_err(Error::Io)?;
        println!("{line}");
        Ok(())
    })?;
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume),
        Command::Predict {
            checkpoint,
            input,
            out,
            config,
            batch_size,
        } => cmd_predict(&checkpoint, &input, &out, config.as_deref(), batch_size),
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
            split,
        } => cmd_evaluate(&checkpoint, &manifest, &out, split.into()),
        Command::Tile { input, out, tile_size } => cmd_tile(&input, &out, tile_size),
        Command::Stitch { tiles, out } => cmd_stitch(&tiles, &out),
        Command::Visualize { pred, label, out } => cmd_visualize(&pred, &label, &out),
        Command::Sweep { config } => cmd_sweep(&config),
        Command::Synth {
            out,
            train,
            test,
            size,
            seed,
        } => {
            write_synthetic_dataset(&out, train, test, size, size, seed)?;
            println!("{}", out.join("manifest.jsonl").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
