//! `dale`: dataset generation, partitioning, training, evaluation and
//! confidence-map inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dale::dataio::{
    generate_dataset, load_dataset, write_dataset, write_f32, write_pgm, DatasetConfig, GrayImage, NoiseConfig,
    NoiseMode, Split, SynthConfig,
};
use dale::numkit::Tensor;
use dale::partition::{split, PartitionConfig};
use dale::segmodel::Checkpoint;
use dale::trainer::{self, Mode, RunConfig, RunDir, TrainState};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "dale", version, about = "Alternating fuzzy/non-fuzzy training for noisy-label segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset (PGM rasters + manifest.json).
    GenData(GenData),
    /// Write fuzzy/non-fuzzy soft masks and patch scores for a dataset split.
    Partition(PartitionCmd),
    /// Train a model (alternating or baseline) and log metrics.csv.
    Train(Train),
    /// Evaluate a checkpoint against clean labels; prints one JSON row.
    Eval(Eval),
    /// Export confidence maps and meta-gradients stored in a checkpoint.
    InspectOmega(InspectOmega),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite the artifacts of a previous run in a non-empty --out.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenData {
    /// Training images.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Test images.
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 32)]
    hw: usize,
    /// Boundary blur sigma in pixels.
    #[arg(long, default_value_t = 3.0)]
    blur: f64,
    /// Fraction of candidate pixels whose label is flipped.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Width in pixels of the boundary band that receives noise.
    #[arg(long, default_value_t = 2)]
    band: usize,
    /// Flip pixels anywhere instead of near boundaries.
    #[arg(long)]
    uniform_noise: bool,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct PartitionCmd {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// Patch height and width.
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dale,
    Baseline,
}

#[derive(Args)]
struct Train {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// JSON run configuration; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Outer iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    phase_epochs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Confidence step size.
    #[arg(long)]
    eta: Option<f64>,
    /// Confidence rounds per iteration.
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    literal_masks: bool,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args)]
struct InspectOmega {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of leading training images to export.
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[command(flatten)]
    out: OutArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Partition(a) => partition(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::InspectOmega(a) => inspect_omega(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn progress(msg: &str) {
    eprintln!("[dale] {msg}");
}

fn open_out(out: &OutArgs, command: &str, config: Value) -> Result<RunDir> {
    let dir = RunDir::create(&out.out, out.force)?;
    dir.write_config(&echo(command, config))?;
    Ok(dir)
}

fn echo(command: &str, config: Value) -> Value {
    json!({ "tool": "dale", "version": VERSION, "command": command, "config": config })
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = DatasetConfig {
        n_train: a.n,
        n_test: a.n_test,
        seed: a.seed,
        synth: SynthConfig {
            height: a.hw,
            width: a.hw,
            blur_sigma: a.blur,
            classes: a.classes,
            ..SynthConfig::default()
        },
        noise: NoiseConfig {
            rate: a.noise,
            band: a.band,
            mode: if a.uniform_noise { NoiseMode::Uniform } else { NoiseMode::BoundaryBand },
        },
    };
    let config = serde_json::to_value(&cfg)?;
    open_out(&a.out, "gen-data", config.clone())?;
    progress(&format!("generating {} train + {} test images of {}x{}", a.n, a.n_test, a.hw, a.hw));
    let data = generate_dataset(&cfg)?;
    let manifest = write_dataset(&a.out.out, &data, a.classes, config)?;
    progress(&format!("wrote {} entries to {}", manifest.entries.len(), a.out.out.display()));
    Ok(())
}

fn partition(a: PartitionCmd) -> Result<()> {
    let cfg = PartitionConfig {
        patch_h: a.patch,
        patch_w: a.patch,
        bins: a.bins,
        tau: a.tau,
    };
    let dir = open_out(&a.out, "partition", json!({ "data": a.data, "split": Split::from(a.split), "partition": cfg }))?;
    let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let samples = data.split(a.split.into());
    let mut scores = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let r = split(s, &cfg)?;
        let (h, w) = (r.masks.height, r.masks.width);
        write_pgm(dir.path().join(format!("fuzzy_{i:04}.pgm")), &GrayImage::from_unit(h, w, &r.masks.fuzzy)?)?;
        write_pgm(dir.path().join(format!("nonfuzzy_{i:04}.pgm")), &GrayImage::from_unit(h, w, &r.masks.nonfuzzy)?)?;
        scores.push(json!({
            "grid": [r.scores.grid_h, r.scores.grid_w],
            "entropy": r.scores.r,
            "edge_ratio": r.scores.e,
            "score": r.scores.m,
        }));
    }
    fs::write(dir.path().join("scores.json"), serde_json::to_string_pretty(&scores)? + "\n")?;
    progress(&format!("partitioned {} images", samples.len()));
    Ok(())
}

/// Sets `root[path...] = value`, creating objects along the way.
fn set_key(root: &mut Value, path: &[&str], value: Value) {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        if !node.get(*key).is_some_and(Value::is_object) {
            node[*key] = json!({});
        }
        node = &mut node[*key];
    }
    node[path[path.len() - 1]] = value;
}

fn merged_config(a: &Train) -> Result<RunConfig> {
    let mut cfg: Value = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => json!({}),
    };
    if !cfg.is_object() {
        bail!("run configuration must be a JSON object");
    }
    if let Some(m) = a.mode {
        set_key(&mut cfg, &["mode"], json!(match m {
            ModeArg::Dale => "dale",
            ModeArg::Baseline => "baseline",
        }));
    }
    let overrides: [(&[&str], Option<Value>); 9] = [
        (&["iterations"], a.iterations.map(Value::from)),
        (&["seed"], a.seed.map(Value::from)),
        (&["adam", "lr"], a.lr.map(Value::from)),
        (&["batch_size"], a.batch_size.map(Value::from)),
        (&["phase_epochs"], a.phase_epochs.map(Value::from)),
        (&["partition", "tau"], a.tau.map(Value::from)),
        (&["calib", "alpha"], a.alpha.map(Value::from)),
        (&["confidence", "eta"], a.eta.map(Value::from)),
        (&["confidence", "rounds"], a.rounds.map(Value::from)),
    ];
    for (path, v) in overrides {
        if let Some(v) = v {
            set_key(&mut cfg, path, v);
        }
    }
    if a.literal_masks {
        set_key(&mut cfg, &["literal_masks"], json!(true));
    }
    let run: RunConfig = serde_json::from_value(cfg).context("invalid run configuration")?;
    run.validate()?;
    Ok(run)
}

fn train(a: Train) -> Result<()> {
    let (dir, mut state, data) = if a.resume {
        let dir = RunDir::open(&a.out.out);
        let ck_path = dir
            .latest_checkpoint()?
            .with_context(|| format!("no checkpoint to resume in {}", a.out.out.display()))?;
        let ck = Checkpoint::read(&ck_path).with_context(|| format!("reading {}", ck_path.display()))?;
        let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
        let mut state = TrainState::from_checkpoint(&ck, &data.train)?;
        if let Some(t) = a.iterations {
            state.config.iterations = t;
        }
        dir.write_config(&echo("train", json!({ "data": a.data, "resumed_from": ck_path, "run": state.config })))?;
        progress(&format!("resuming from {} at t={}", ck_path.display(), state.iteration));
        (dir, state, data)
    } else {
        let config = merged_config(&a)?;
        let dir = open_out(&a.out, "train", json!({ "data": a.data, "run": config }))?;
        let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
        let state = TrainState::new(config, &data.train)?;
        (dir, state, data)
    };
    let mode = match state.config.mode {
        Mode::Dale => "dale",
        Mode::Baseline => "baseline",
    };
    progress(&format!(
        "training {mode} for {} iterations on {} images ({} params)",
        state.config.iterations,
        data.train.len(),
        state.params.num_params()
    ));
    trainer::run(&mut state, &data.test, Some(&dir), &mut |m| progress(m))?;
    progress(&format!("done: {} optimizer steps", state.steps));
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ck = Checkpoint::read(&a.ckpt).with_context(|| format!("reading {}", a.ckpt.display()))?;
    let (params, _) = ck.to_model()?;
    let data = load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let samples = data.split(a.split.into());
    let ev = trainer::evaluate(&params, samples)?;
    let row = json!({
        "checkpoint": a.ckpt,
        "split": Split::from(a.split),
        "samples": samples.len(),
        "Dice": ev.clean.dice,
        "mIoU": ev.clean.miou,
        "HD95": ev.clean.hd95,
        "ASD": ev.clean.asd,
        "noisy_Dice": ev.noisy_dice,
    });
    println!("{}", serde_json::to_string(&row)?);
    Ok(())
}

fn preview(path: &Path, values: &[f64], h: usize, w: usize, lo: f64, hi: f64) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let unit: Vec<f64> = values.iter().map(|v| (v - lo) / span).collect();
    write_pgm(path, &GrayImage::from_unit(h, w, &unit)?)?;
    Ok(())
}

fn inspect_omega(a: InspectOmega) -> Result<()> {
    let ck = Checkpoint::read(&a.ckpt).with_context(|| format!("reading {}", a.ckpt.display()))?;
    let (Some(omega), Some(grad)) = (ck.get("omega"), ck.get("grad_omega")) else {
        bail!("{} holds no confidence maps (baseline run?)", a.ckpt.display());
    };
    let omega_max = ck.extra()["config"]["confidence"]["omega_max"].as_f64().unwrap_or(2.0);
    let dir = open_out(&a.out, "inspect-omega", json!({ "checkpoint": a.ckpt, "images": a.images }))?;
    let s = omega.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    let count = a.images.min(n);
    for i in 0..count {
        let span = i * h * w..(i + 1) * h * w;
        let om = &omega.data()[span.clone()];
        let gr = &grad.data()[span];
        write_f32(dir.path().join(format!("omega_img{i:04}.dlf1")), &Tensor::new(vec![h, w], om.to_vec())?)?;
        write_f32(dir.path().join(format!("grad_img{i:04}.dlf1")), &Tensor::new(vec![h, w], gr.to_vec())?)?;
        preview(&dir.path().join(format!("omega_img{i:04}.pgm")), om, h, w, 0.0, omega_max)?;
        let g_abs = gr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        preview(&dir.path().join(format!("grad_img{i:04}.pgm")), gr, h, w, -g_abs, g_abs)?;
    }
    progress(&format!("exported {count} of {n} confidence maps"));
    Ok(())
}
