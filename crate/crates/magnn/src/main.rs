//! Batch command-line surface: train a forecaster, evaluate a checkpoint,
//! run ablation matrices, and generate synthetic data.
//!
//! Settings resolve in three layers — built-in defaults, then a `key=value`
//! config file (`--config`), then explicit flags. Every command writes a
//! `manifest.json` describing the resolved run, and every file a command
//! names exists when it exits 0. Usage problems exit 2 naming the offending
//! flag; runtime failures exit 1 naming the stage that failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use magnn::data::{default_coupling, load_csv, synth_multiscale, MtsDataset, Split};
use magnn::fusion::FusionVariant;
use magnn::gnn::GnnVariant;
use magnn::graph::{graph_to_csv, GraphVariant};
use magnn::metrics::EvalResult;
use magnn::model::{
    default_tau, load_checkpoint, save_checkpoint, inspect, ModelConfig, ModelState,
};
use magnn::train::{evaluate_split, fit, predict_split, TrainConfig, TrainReport};

const METRICS_SCHEMA_VERSION: u32 = 1;
const VALID_VARIANTS: [&str; 8] = [
    "standard",
    "shared_one",
    "symmetric",
    "full",
    "one_gnn",
    "concat",
    "mean_pool",
    "no_parallel",
];

#[derive(Parser)]
#[command(
    name = "magnn",
    version,
    about = "Multi-scale adaptive-graph forecaster for multivariate time series"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint, metrics, and manifest
    Train(TrainArgs),
    /// Recompute test metrics from a checkpoint, with optional exports
    Evaluate(EvalArgs),
    /// Train several model variants under one config and tabulate them
    Ablate(AblateArgs),
    /// Generate a synthetic multi-period dataset CSV
    Synth(SynthArgs),
}

/// Flags shared by `train` and `ablate`. Every value is optional here;
/// defaults and the config file fill the gaps during resolution.
#[derive(Args, Clone)]
struct CommonArgs {
    /// Dataset CSV path, rows = timesteps (required)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Field delimiter [default: ,]
    #[arg(long)]
    delimiter: Option<char>,
    /// Treat the first row as variable names [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    header: Option<bool>,
    /// Forecast horizon in steps [default: 3]
    #[arg(long)]
    horizon: Option<usize>,
    /// Input window length T [default: 168]
    #[arg(long)]
    window: Option<usize>,
    /// Number of pyramid scales K [default: 4]
    #[arg(long)]
    scales: Option<usize>,
    /// Convolution channels per scale [default: 16]
    #[arg(long)]
    channels: Option<usize>,
    /// Node embedding width [default: 16]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Neighbors kept per node; [default: min(N,40) if N>50 else min(N,8)]
    #[arg(long)]
    tau: Option<usize>,
    /// Graph propagation depth [default: 2]
    #[arg(long)]
    gnn_depth: Option<usize>,
    /// Per-scale representation width [default: 16]
    #[arg(long)]
    ds: Option<usize>,
    /// Fusion gate hidden width [default: 2K]
    #[arg(long)]
    d1: Option<usize>,
    /// Dropout probability [default: 0.1]
    #[arg(long)]
    dropout: Option<f64>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// Epoch budget; 0 reports untrained metrics [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without val-RSE improvement before stopping [default: 5]
    #[arg(long)]
    patience: Option<usize>,
    /// RNG seed for init, shuffling, and dropout [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated variant names; train accepts exactly one
    /// [default: standard]
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Comma-separated seeds for ablation medians [default: the --seed]
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory [default: magnn-out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value settings file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint path (required)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV path, rows = timesteps (required)
    #[arg(long)]
    data: PathBuf,
    /// Field delimiter [default: ,]
    #[arg(long)]
    delimiter: Option<char>,
    /// Treat the first row as variable names [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    header: Option<bool>,
    /// Output directory for metrics and manifest [default: magnn-out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one adjacency CSV per scale into DIR
    #[arg(long, value_name = "DIR")]
    export_graph: Option<PathBuf>,
    /// Write mean fusion weights (scale,weight) to FILE
    #[arg(long, value_name = "FILE")]
    dump_alpha: Option<PathBuf>,
    /// Write test predictions (timestep,variable,truth,prediction) to FILE
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of variables [default: 8]
    #[arg(long)]
    n: Option<usize>,
    /// Series length in timesteps [default: 5000]
    #[arg(long)]
    len: Option<usize>,
    /// Comma-separated sinusoid periods [default: 24,168]
    #[arg(long, value_delimiter = ',')]
    periods: Vec<usize>,
    /// Gaussian noise standard deviation [default: 0.1]
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Off-diagonal coupling strength in [0,1] [default: 0.6]
    #[arg(long)]
    coupling: Option<f64>,
    /// RNG seed [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: magnn-out]
    #[arg(long)]
    out: Option<PathBuf>,
}

/// How a command failed: usage problems exit 2, runtime problems exit 1.
enum Failure {
    Usage(String),
    Runtime { stage: &'static str, message: String },
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn rt(stage: &'static str) -> impl Fn(magnn::Error) -> Failure {
    move |e| Failure::Runtime {
        stage,
        message: e.to_string(),
    }
}

fn rt_io(stage: &'static str) -> impl Fn(std::io::Error) -> Failure {
    move |e| Failure::Runtime {
        stage,
        message: e.to_string(),
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime { stage, message }) => {
            eprintln!("error in {stage}: {message}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Synth(args) => cmd_synth(args),
    }
}

/// Fully materialized settings after defaults < config file < flags.
#[derive(Debug, Clone)]
struct Resolved {
    data: Option<PathBuf>,
    delimiter: char,
    header: bool,
    horizon: usize,
    window: usize,
    scales: usize,
    channels: usize,
    embed_dim: usize,
    tau: Option<usize>,
    gnn_depth: usize,
    ds: usize,
    d1: Option<usize>,
    dropout: f64,
    lr: f64,
    batch: usize,
    epochs: usize,
    patience: usize,
    seed: u64,
    variants: Vec<String>,
    seeds: Vec<u64>,
    out: PathBuf,
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Failure> {
    value
        .parse::<T>()
        .map_err(|_| usage(format!("config file: invalid value {value:?} for key {key}")))
}

/// Applies one `key=value` config-file line onto unset flag slots.
fn apply_file_entry(args: &mut CommonArgs, key: &str, value: &str) -> Result<(), Failure> {
    match key {
        "data" => args.data.get_or_insert_with(|| PathBuf::from(value)),
        "out" => args.out.get_or_insert_with(|| PathBuf::from(value)),
        "delimiter" => {
            let c: char = parse_scalar(key, value)?;
            args.delimiter.get_or_insert(c);
            return Ok(());
        }
        "header" => {
            let b: bool = parse_scalar(key, value)?;
            args.header.get_or_insert(b);
            return Ok(());
        }
        "horizon" => return insert(&mut args.horizon, key, value),
        "window" => return insert(&mut args.window, key, value),
        "scales" => return insert(&mut args.scales, key, value),
        "channels" => return insert(&mut args.channels, key, value),
        "embed-dim" => return insert(&mut args.embed_dim, key, value),
        "tau" => return insert(&mut args.tau, key, value),
        "gnn-depth" => return insert(&mut args.gnn_depth, key, value),
        "ds" => return insert(&mut args.ds, key, value),
        "d1" => return insert(&mut args.d1, key, value),
        "dropout" => return insert(&mut args.dropout, key, value),
        "lr" => return insert(&mut args.lr, key, value),
        "batch" => return insert(&mut args.batch, key, value),
        "epochs" => return insert(&mut args.epochs, key, value),
        "patience" => return insert(&mut args.patience, key, value),
        "seed" => return insert(&mut args.seed, key, value),
        "variants" => {
            if args.variants.is_empty() {
                args.variants = value.split(',').map(|s| s.trim().to_string()).collect();
            }
            return Ok(());
        }
        "seeds" => {
            if args.seeds.is_empty() {
                for part in value.split(',') {
                    args.seeds.push(parse_scalar("seeds", part.trim())?);
                }
            }
            return Ok(());
        }
        _ => return Err(usage(format!("config file: unknown key {key:?}"))),
    };
    Ok(())
}

fn insert<T: std::str::FromStr>(
    slot: &mut Option<T>,
    key: &str,
    value: &str,
) -> Result<(), Failure> {
    if slot.is_none() {
        *slot = Some(parse_scalar(key, value)?);
    }
    Ok(())
}

/// Folds the config file (when given) under the flags, then materializes
/// every default and validates flag-level ranges.
fn resolve(mut args: CommonArgs) -> Result<Resolved, Failure> {
    if let Some(path) = args.config.clone() {
        let text = fs::read_to_string(&path).map_err(|e| {
            usage(format!("--config {}: {e}", path.display()))
        })?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "config file line {}: expected key=value, got {line:?}",
                    lineno + 1
                ))
            })?;
            apply_file_entry(&mut args, key.trim(), value.trim())?;
        }
    }
    let scales = args.scales.unwrap_or(4);
    let r = Resolved {
        data: args.data,
        delimiter: args.delimiter.unwrap_or(','),
        header: args.header.unwrap_or(false),
        horizon: args.horizon.unwrap_or(3),
        window: args.window.unwrap_or(168),
        scales,
        channels: args.channels.unwrap_or(16),
        embed_dim: args.embed_dim.unwrap_or(16),
        tau: args.tau,
        gnn_depth: args.gnn_depth.unwrap_or(2),
        ds: args.ds.unwrap_or(16),
        d1: args.d1,
        dropout: args.dropout.unwrap_or(0.1),
        lr: args.lr.unwrap_or(0.001),
        batch: args.batch.unwrap_or(32),
        epochs: args.epochs.unwrap_or(30),
        patience: args.patience.unwrap_or(5),
        seed: args.seed.unwrap_or(42),
        variants: if args.variants.is_empty() {
            vec!["standard".into()]
        } else {
            args.variants
        },
        seeds: args.seeds,
        out: args.out.unwrap_or_else(|| PathBuf::from("magnn-out")),
    };
    // Flag-level range checks; each message names the flag it rejects.
    let positives: [(&str, usize); 8] = [
        ("--horizon", r.horizon),
        ("--window", r.window),
        ("--scales", r.scales),
        ("--channels", r.channels),
        ("--embed-dim", r.embed_dim),
        ("--gnn-depth", r.gnn_depth),
        ("--ds", r.ds),
        ("--batch", r.batch),
    ];
    for (flag, v) in positives {
        if v == 0 {
            return Err(usage(format!("{flag} must be >= 1")));
        }
    }
    if let Some(tau) = r.tau {
        if tau == 0 {
            return Err(usage("--tau must be >= 1"));
        }
    }
    if let Some(d1) = r.d1 {
        if d1 == 0 {
            return Err(usage("--d1 must be >= 1"));
        }
    }
    if !r.dropout.is_finite() || !(0.0..1.0).contains(&r.dropout) {
        return Err(usage("--dropout must be in [0, 1)"));
    }
    if !r.lr.is_finite() || r.lr < 0.0 {
        return Err(usage("--lr must be finite and >= 0"));
    }
    if r.patience == 0 {
        return Err(usage("--patience must be >= 1"));
    }
    if r.epochs > 0 && r.patience > r.epochs {
        return Err(usage("--patience must not exceed --epochs"));
    }
    for name in &r.variants {
        if !VALID_VARIANTS.contains(&name.as_str()) {
            return Err(usage(format!(
                "--variants: unknown variant {name:?}; valid names: {}",
                VALID_VARIANTS.join(", ")
            )));
        }
    }
    Ok(r)
}

/// Maps a variant name onto the four config switches.
fn apply_variant(cfg: &mut ModelConfig, name: &str) {
    match name {
        "shared_one" => cfg.graph_variant = GraphVariant::SharedOne,
        "symmetric" => cfg.graph_variant = GraphVariant::Symmetric,
        "full" => cfg.graph_variant = GraphVariant::Full,
        "one_gnn" => cfg.gnn_variant = GnnVariant::One,
        "concat" => cfg.fusion_variant = FusionVariant::Concat,
        "mean_pool" => cfg.fusion_variant = FusionVariant::MeanPool,
        "no_parallel" => cfg.pyramid_parallel = false,
        _ => {} // "standard": all defaults
    }
}

fn build_model_config(r: &Resolved, n_vars: usize, variant: &str, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::for_dataset(n_vars, r.horizon);
    cfg.window = r.window;
    cfg.k_scales = r.scales;
    cfg.kernels = magnn::model::default_kernels(r.scales);
    cfg.channels = r.channels;
    cfg.embed_dim = r.embed_dim;
    cfg.tau = r.tau.unwrap_or_else(|| default_tau(n_vars));
    cfg.gnn_depth = r.gnn_depth;
    cfg.d_s = r.ds;
    cfg.d_1 = r.d1.unwrap_or(2 * r.scales);
    cfg.dropout = r.dropout;
    cfg.seed = seed;
    apply_variant(&mut cfg, variant);
    cfg
}

fn build_train_config(r: &Resolved, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: r.lr,
        batch_size: r.batch,
        max_epochs: r.epochs,
        patience: r.patience,
        seed,
        ..TrainConfig::default()
    }
}

fn sha256_file(path: &Path) -> Result<String, std::io::Error> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn load_dataset(
    path: &Path,
    delimiter: char,
    header: bool,
) -> Result<(MtsDataset, String), Failure> {
    let ds = load_csv(path, delimiter, header).map_err(rt("load-data"))?;
    let digest = sha256_file(path).map_err(rt_io("load-data"))?;
    Ok((ds, digest))
}

/// The self-describing record every command writes next to its artifacts.
#[derive(Serialize)]
struct RunManifest {
    schema_version: u32,
    command: String,
    code_version: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_config: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variants: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<Vec<u64>>,
    artifacts: BTreeMap<String, String>,
    wall_seconds: f64,
}

impl RunManifest {
    fn new(seed: u64) -> Self {
        RunManifest {
            schema_version: METRICS_SCHEMA_VERSION,
            command: std::env::args().collect::<Vec<_>>().join(" "),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            dataset_path: None,
            dataset_sha256: None,
            model_config: None,
            train_config: None,
            variants: None,
            seeds: None,
            artifacts: BTreeMap::new(),
            wall_seconds: 0.0,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: &'static str) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime {
        stage,
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(rt_io(stage))
}

#[derive(Serialize)]
struct TrainMetricsFile {
    schema_version: u32,
    #[serde(flatten)]
    report: TrainReport,
}

#[derive(Serialize)]
struct EvalMetricsFile {
    schema_version: u32,
    checkpoint: String,
    #[serde(flatten)]
    result: EvalResult,
    metrics_on: String,
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let t0 = Instant::now();
    let r = resolve(args.common)?;
    if r.variants.len() > 1 {
        return Err(usage("--variants: train accepts exactly one variant name"));
    }
    let variant = r.variants[0].clone();
    let data_path = r.data.clone().ok_or_else(|| usage("--data is required"))?;
    let (ds, digest) = load_dataset(&data_path, r.delimiter, r.header)?;

    let cfg = build_model_config(&r, ds.n_vars, &variant, r.seed);
    cfg.validate().map_err(rt("configure"))?;
    let tc = build_train_config(&r, r.seed);
    tc.validate().map_err(rt("configure"))?;

    let mut state = ModelState::init(&cfg).map_err(rt("init-model"))?;
    let report = fit(&mut state, &cfg, &ds, &tc).map_err(rt("train"))?;

    fs::create_dir_all(&r.out).map_err(rt_io("write-artifacts"))?;
    let ckpt_path = r.out.join("checkpoint.magnn");
    save_checkpoint(&state, &cfg, &ckpt_path).map_err(rt("save-checkpoint"))?;
    let metrics_path = r.out.join("metrics.json");
    write_json(
        &metrics_path,
        &TrainMetricsFile {
            schema_version: METRICS_SCHEMA_VERSION,
            report: report.clone(),
        },
        "write-artifacts",
    )?;

    let mut manifest = RunManifest::new(r.seed);
    manifest.dataset_path = Some(data_path.display().to_string());
    manifest.dataset_sha256 = Some(digest);
    manifest.model_config = Some(cfg);
    manifest.train_config = Some(tc);
    manifest
        .artifacts
        .insert("checkpoint".into(), ckpt_path.display().to_string());
    manifest
        .artifacts
        .insert("metrics".into(), metrics_path.display().to_string());
    manifest.wall_seconds = t0.elapsed().as_secs_f64();
    write_json(&r.out.join("manifest.json"), &manifest, "write-artifacts")?;

    println!("RSE={} CORR={}", report.test.rse, report.test.corr);
    Ok(())
}

fn cmd_evaluate(args: EvalArgs) -> Result<(), Failure> {
    let t0 = Instant::now();
    let (state, cfg) = load_checkpoint(&args.checkpoint).map_err(rt("load-checkpoint"))?;
    let delimiter = args.delimiter.unwrap_or(',');
    let header = args.header.unwrap_or(false);
    let (ds, digest) = load_dataset(&args.data, delimiter, header)?;
    if ds.n_vars != cfg.n_vars {
        return Err(Failure::Runtime {
            stage: "load-checkpoint",
            message: format!(
                "checkpoint was trained on {} variables but the dataset has {}",
                cfg.n_vars, ds.n_vars
            ),
        });
    }

    let result = evaluate_split(&state, &cfg, &ds, Split::Test).map_err(rt("evaluate"))?;

    let out = args.out.unwrap_or_else(|| PathBuf::from("magnn-out"));
    fs::create_dir_all(&out).map_err(rt_io("write-artifacts"))?;
    let mut manifest = RunManifest::new(cfg.seed);
    manifest.dataset_path = Some(args.data.display().to_string());
    manifest.dataset_sha256 = Some(digest);
    manifest.model_config = Some(cfg.clone());

    if args.export_graph.is_some() || args.dump_alpha.is_some() {
        // Graphs depend only on parameters; mean fusion weights use the
        // test windows (capped to bound the pass).
        let windows = magnn::data::make_windows(&ds, Split::Test, cfg.window, cfg.horizon)
            .map_err(rt("evaluate"))?;
        let cap = windows.len().min(256);
        let inputs: Vec<Vec<f64>> = windows[..cap].iter().map(|w| w.input.clone()).collect();
        let (graphs, alpha) = inspect(&state, &cfg, &inputs).map_err(rt("evaluate"))?;
        if let Some(dir) = &args.export_graph {
            fs::create_dir_all(dir).map_err(rt_io("export-graph"))?;
            for (idx, g) in graphs.iter().enumerate() {
                let path = dir.join(format!("graph_scale_{}.csv", idx + 1));
                fs::write(&path, graph_to_csv(g, cfg.n_vars, idx + 1, cfg.tau))
                    .map_err(rt_io("export-graph"))?;
                manifest
                    .artifacts
                    .insert(format!("graph_scale_{}", idx + 1), path.display().to_string());
            }
        }
        if let Some(path) = &args.dump_alpha {
            let alpha = alpha.ok_or_else(|| Failure::Runtime {
                stage: "dump-alpha",
                message: "this fusion variant has no per-scale weights".into(),
            })?;
            let mut text = String::from("scale,weight\n");
            for (k, a) in alpha.iter().enumerate() {
                text.push_str(&format!("{},{}\n", k + 1, a));
            }
            fs::write(path, text).map_err(rt_io("dump-alpha"))?;
            manifest
                .artifacts
                .insert("alpha".into(), path.display().to_string());
        }
    }

    if let Some(path) = &args.predictions {
        let preds = predict_split(&state, &cfg, &ds, Split::Test).map_err(rt("evaluate"))?;
        let mut text = String::from("timestep,variable,truth,prediction\n");
        for (i, &t) in preds.target_indices.iter().enumerate() {
            for v in 0..cfg.n_vars {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    t, ds.variable_names[v], preds.truths[i][v], preds.predictions[i][v]
                ));
            }
        }
        fs::write(path, text).map_err(rt_io("write-predictions"))?;
        manifest
            .artifacts
            .insert("predictions".into(), path.display().to_string());
    }

    let metrics_path = out.join("metrics.json");
    write_json(
        &metrics_path,
        &EvalMetricsFile {
            schema_version: METRICS_SCHEMA_VERSION,
            checkpoint: args.checkpoint.display().to_string(),
            result: result.clone(),
            metrics_on: "raw".into(),
        },
        "write-artifacts",
    )?;
    manifest
        .artifacts
        .insert("metrics".into(), metrics_path.display().to_string());
    manifest.wall_seconds = t0.elapsed().as_secs_f64();
    write_json(&out.join("manifest.json"), &manifest, "write-artifacts")?;

    println!("RSE={} CORR={}", result.rse, result.corr);
    Ok(())
}

/// One ablation table row: medians across seeds for one variant.
#[derive(Serialize)]
struct AblationRow {
    variant: String,
    seeds: usize,
    median_val_rse: f64,
    median_test_rse: f64,
    median_test_corr: f64,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Failure> {
    let t0 = Instant::now();
    let r = resolve(args.common)?;
    // resolve() defaults an empty list to ["standard"], so an explicitly
    // empty --variants only reaches here as a lone empty string.
    if r.variants.iter().any(|v| v.trim().is_empty()) {
        return Err(usage(format!(
            "--variants must name at least one variant; valid names: {}",
            VALID_VARIANTS.join(", ")
        )));
    }
    let data_path = r.data.clone().ok_or_else(|| usage("--data is required"))?;
    let (ds, digest) = load_dataset(&data_path, r.delimiter, r.header)?;
    let seeds = if r.seeds.is_empty() {
        vec![r.seed]
    } else {
        r.seeds.clone()
    };

    let mut rows: Vec<AblationRow> = Vec::new();
    for name in &r.variants {
        let mut val_rses = Vec::with_capacity(seeds.len());
        let mut test_rses = Vec::with_capacity(seeds.len());
        let mut test_corrs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let cfg = build_model_config(&r, ds.n_vars, name, seed);
            cfg.validate().map_err(rt("configure"))?;
            let tc = build_train_config(&r, seed);
            tc.validate().map_err(rt("configure"))?;
            let mut state = ModelState::init(&cfg).map_err(rt("init-model"))?;
            let report = fit(&mut state, &cfg, &ds, &tc).map_err(rt("train"))?;
            let best_val = report
                .epochs
                .iter()
                .map(|e| e.val_rse)
                .fold(f64::INFINITY, f64::min);
            val_rses.push(if best_val.is_finite() {
                best_val
            } else {
                report.test.rse // max_epochs=0: no val epochs ran
            });
            test_rses.push(report.test.rse);
            test_corrs.push(report.test.corr);
        }
        rows.push(AblationRow {
            variant: name.clone(),
            seeds: seeds.len(),
            median_val_rse: median(&mut val_rses),
            median_test_rse: median(&mut test_rses),
            median_test_corr: median(&mut test_corrs),
        });
    }
    rows.sort_by(|a, b| a.variant.cmp(&b.variant));

    fs::create_dir_all(&r.out).map_err(rt_io("write-artifacts"))?;
    let csv_path = r.out.join("ablation.csv");
    let mut csv = String::from("variant,seeds,median_val_rse,median_test_rse,median_test_corr\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.variant, row.seeds, row.median_val_rse, row.median_test_rse, row.median_test_corr
        ));
    }
    fs::write(&csv_path, &csv).map_err(rt_io("write-artifacts"))?;

    println!(
        "{:<12} {:>6} {:>16} {:>16} {:>16}",
        "variant", "seeds", "median_val_rse", "median_test_rse", "median_test_corr"
    );
    for row in &rows {
        println!(
            "{:<12} {:>6} {:>16.6} {:>16.6} {:>16.6}",
            row.variant, row.seeds, row.median_val_rse, row.median_test_rse, row.median_test_corr
        );
    }

    let mut manifest = RunManifest::new(r.seed);
    manifest.dataset_path = Some(data_path.display().to_string());
    manifest.dataset_sha256 = Some(digest);
    manifest.variants = Some(r.variants.clone());
    manifest.seeds = Some(seeds);
    manifest
        .artifacts
        .insert("ablation".into(), csv_path.display().to_string());
    manifest.wall_seconds = t0.elapsed().as_secs_f64();
    write_json(&r.out.join("manifest.json"), &manifest, "write-artifacts")?;
    Ok(())
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let t0 = Instant::now();
    let n = args.n.unwrap_or(8);
    let len = args.len.unwrap_or(5000);
    let periods = if args.periods.is_empty() {
        vec![24, 168]
    } else {
        args.periods.clone()
    };
    let noise_sd = args.noise_sd.unwrap_or(0.1);
    let coupling = args.coupling.unwrap_or(0.6);
    let seed = args.seed.unwrap_or(42);
    let out = args.out.unwrap_or_else(|| PathBuf::from("magnn-out"));
    if n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    if periods.contains(&0) {
        return Err(usage("--periods entries must be >= 1"));
    }
    if !noise_sd.is_finite() || noise_sd < 0.0 {
        return Err(usage("--noise-sd must be finite and >= 0"));
    }
    if !coupling.is_finite() || !(0.0..=1.0).contains(&coupling) {
        return Err(usage("--coupling must be in [0, 1]"));
    }

    let mixing = default_coupling(n, coupling);
    let ds = synth_multiscale(n, len, &periods, &mixing, noise_sd, seed).map_err(rt("synth"))?;
    fs::create_dir_all(&out).map_err(rt_io("write-artifacts"))?;
    let csv_path = out.join("synthetic.csv");
    ds.save_csv(&csv_path, ',', true).map_err(rt("write-artifacts"))?;
    let digest = sha256_file(&csv_path).map_err(rt_io("write-artifacts"))?;

    let mut manifest = RunManifest::new(seed);
    manifest.dataset_path = Some(csv_path.display().to_string());
    manifest.dataset_sha256 = Some(digest);
    manifest
        .artifacts
        .insert("dataset".into(), csv_path.display().to_string());
    manifest.wall_seconds = t0.elapsed().as_secs_f64();
    write_json(&out.join("manifest.json"), &manifest, "write-artifacts")?;

    println!("wrote {} ({n} variables, {len} rows)", csv_path.display());
    Ok(())
}
