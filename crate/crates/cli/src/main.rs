//! `tirdet` — the pipeline as a command line tool.
//!
//! One executable, ten subcommands: scene generation, kernel enhancement,
//! background separation / translation / composition, network training,
//! inference, evaluation, k-fold cross-validation, and gradient
//! verification. Every subcommand reads one flat JSON config (via
//! `--config file.json`) with `--key value` overrides on top (overrides
//! win), validates it strictly — unknown keys are an error — and writes a
//! `run_manifest.json` capturing the fully resolved config, seeds, paths,
//! version, and wall time. Pointing `--config` at a previous run's manifest
//! reruns it: manifests embed their config and are detected and unwrapped.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric-contract
//! violation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use tirdet_core::dataprep::{compose, separate_background, translate_surrogate, LabeledImage, SurrogateParams};
use tirdet_core::enhance::{build_default_bank, enhance_stack, Aspect};
use tirdet_core::imgio::{normalize, read_mask_pgm, read_pgm, write_mask_pgm, write_pgm, Image, Mask};
use tirdet_core::metrics::cross_validate;
use tirdet_core::nn::checkpoint::write_atomic;
use tirdet_core::nn::gradcheck::{check_input_gradient, relative_error, DEFAULT_STEP};
use tirdet_core::nn::Tensor;
use tirdet_core::segnet::{
    self, build_network, evaluate_network, infer, load_manifest_items, load_network,
    save_network, train, HeadKind, NetConfig, OptimizerKind, PosWeight, TrainConfig,
};
use tirdet_core::synthgen::{gen_dataset, SceneParams};
use tirdet_core::Error as CoreError;

const VERSION: &str = env!("CARGO_PKG_VERSION");
const SUBCOMMANDS: &[&str] = &[
    "gen", "enhance", "separate", "translate", "compose", "train", "infer", "eval", "kfold",
    "gradcheck",
];

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    Config(String),
    Core(CoreError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(CoreError::InvalidConfig(_)) => 2,
            CliError::Core(CoreError::NumericContract(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(args: &[String]) -> CliResult<()> {
    let Some(sub) = args.first() else {
        print_global_help();
        return Err(config_err("missing subcommand"));
    };
    if sub == "--help" || sub == "-h" {
        print_global_help();
        return Ok(());
    }
    if sub == "--version" {
        println!("tirdet {VERSION}");
        return Ok(());
    }
    if !SUBCOMMANDS.contains(&sub.as_str()) {
        return Err(config_err(format!(
            "unknown subcommand `{sub}` (expected one of: {})",
            SUBCOMMANDS.join(", ")
        )));
    }
    let rest = &args[1..];
    if rest.iter().any(|a| a == "--help" || a == "-h") {
        print_subcommand_help(sub);
        return Ok(());
    }
    match sub.as_str() {
        "gen" => run_gen(rest),
        "enhance" => run_enhance(rest),
        "separate" => run_separate(rest),
        "translate" => run_translate(rest),
        "compose" => run_compose(rest),
        "train" => run_train(rest),
        "infer" => run_infer(rest),
        "eval" => run_eval(rest),
        "kfold" => run_kfold(rest),
        "gradcheck" => run_gradcheck(rest),
        _ => unreachable!("validated above"),
    }
}

// ---------------------------------------------------------------------------
// Config machinery: defaults <- config file <- --key value overrides
// ---------------------------------------------------------------------------

/// Split `--key value` pairs, extracting `--config <path>`.
fn parse_overrides(args: &[String]) -> CliResult<(Option<PathBuf>, Vec<(String, Value)>)> {
    let mut config_path = None;
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let key = args[i]
            .strip_prefix("--")
            .ok_or_else(|| config_err(format!("expected --key, got `{}`", args[i])))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| config_err(format!("--{key} is missing its value")))?;
        i += 2;
        if key == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            // A value that parses as JSON is taken as JSON (numbers, bools,
            // arrays, null); anything else is a plain string.
            let parsed =
                serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.clone()));
            overrides.push((key.to_string(), parsed));
        }
    }
    Ok((config_path, overrides))
}

/// Load defaults, overlay the config file (if any), overlay CLI overrides,
/// then deserialize strictly. Returns the typed config and its resolved JSON
/// form for the run manifest.
fn resolve_config<C>(sub: &str, args: &[String]) -> CliResult<(C, Value)>
where
    C: Serialize + DeserializeOwned + Default,
{
    let (config_path, overrides) = parse_overrides(args)?;
    let mut merged = serde_json::to_value(C::default()).expect("default config serializes");
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut file_value: Value = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("config {} is not JSON: {e}", path.display())))?;
        // A run manifest wraps its config; unwrap so `--config
        // run_manifest.json` reruns the original invocation.
        if file_value.get("subcommand").is_some() {
            if let Some(inner) = file_value.get("config") {
                file_value = inner.clone();
            }
        }
        let Value::Object(file_map) = file_value else {
            return Err(config_err(format!(
                "config {} must be a JSON object",
                path.display()
            )));
        };
        let map = merged.as_object_mut().expect("config is an object");
        for (k, v) in file_map {
            map.insert(k, v);
        }
    }
    let map = merged.as_object_mut().expect("config is an object");
    for (k, v) in overrides {
        map.insert(k, v);
    }
    let config: C = serde_json::from_value(merged)
        .map_err(|e| config_err(format!("invalid {sub} config: {e}")))?;
    let resolved = serde_json::to_value(&config).expect("config serializes");
    Ok((config, resolved))
}

/// Write `<out>/run_manifest.json` atomically.
fn write_run_manifest(
    out: &Path,
    sub: &str,
    resolved: &Value,
    inputs: &[String],
    outputs: &[String],
    started: Instant,
) -> CliResult<()> {
    let mut seeds = serde_json::Map::new();
    if let Value::Object(map) = resolved {
        for (k, v) in map {
            if k.contains("seed") {
                seeds.insert(k.clone(), v.clone());
            }
        }
    }
    let manifest = json!({
        "subcommand": sub,
        "version": VERSION,
        "config": resolved,
        "seeds": Value::Object(seeds),
        "inputs": inputs,
        "outputs": outputs,
        "duration_seconds": started.elapsed().as_secs_f64(),
    });
    write_json(&out.join("run_manifest.json"), &manifest)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| config_err(format!("report not serializable: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn ensure_out_dir(out: &str) -> CliResult<PathBuf> {
    let dir = PathBuf::from(out);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Core(CoreError::io(&dir, e)))?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenConfig {
    width: usize,
    height: usize,
    n_targets: usize,
    target_extent: usize,
    target_snr: f64,
    clutter_amplitude: f64,
    clutter_wavelength: f64,
    row_noise_sigma: f64,
    pixel_noise_sigma: f64,
    horizon_gradient: f64,
    count: usize,
    seed: u64,
    out: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        let s = SceneParams::default();
        GenConfig {
            width: s.width,
            height: s.height,
            n_targets: s.n_targets,
            target_extent: s.target_extent,
            target_snr: s.target_snr,
            clutter_amplitude: s.clutter_amplitude,
            clutter_wavelength: s.clutter_wavelength,
            row_noise_sigma: s.row_noise_sigma,
            pixel_noise_sigma: s.pixel_noise_sigma,
            horizon_gradient: s.horizon_gradient,
            count: 100,
            seed: 0,
            out: "gen-out".into(),
        }
    }
}

fn run_gen(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<GenConfig>("gen", args)?;
    let base = SceneParams {
        width: cfg.width,
        height: cfg.height,
        n_targets: cfg.n_targets,
        target_extent: cfg.target_extent,
        target_snr: cfg.target_snr,
        clutter_amplitude: cfg.clutter_amplitude,
        clutter_wavelength: cfg.clutter_wavelength,
        row_noise_sigma: cfg.row_noise_sigma,
        pixel_noise_sigma: cfg.pixel_noise_sigma,
        horizon_gradient: cfg.horizon_gradient,
        seed: 0,
    };
    let out = ensure_out_dir(&cfg.out)?;
    let dataset = gen_dataset(&base, cfg.count, cfg.seed)?;
    dataset.write(&out)?;
    let outputs = vec!["images/".into(), "masks/".into(), "manifest.json".into()];
    write_run_manifest(&out, "gen", &resolved, &[], &outputs, started)?;
    println!("wrote {} scenes to {}", cfg.count, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// enhance
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EnhanceConfig {
    input: String,
    out: String,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            input: "input.pgm".into(),
            out: "enhance-out".into(),
        }
    }
}

fn aspect_tag(a: Aspect) -> &'static str {
    match a {
        Aspect::Square => "square",
        Aspect::Horizontal => "horizontal",
        Aspect::Vertical => "vertical",
    }
}

fn run_enhance(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<EnhanceConfig>("enhance", args)?;
    let image = read_pgm(&cfg.input)?;
    let bank = build_default_bank();
    let stack = enhance_stack(&image, &bank)?;
    let out = ensure_out_dir(&cfg.out)?;

    let mut channels = Vec::new();
    let mut outputs = Vec::new();
    for c in 0..1 + bank.len() {
        let plane = stack.plane_image(0, c)?;
        let min = plane.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = plane
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let file = if c == 0 {
            "channel_00_raw.pgm".to_string()
        } else {
            let k = &bank.kernels()[c - 1];
            format!(
                "channel_{c:02}_k{}_{}.pgm",
                k.size(),
                &aspect_tag(k.aspect())[..1]
            )
        };
        write_pgm(&normalize(&plane), out.join(&file), 65535)?;
        let meta = if c == 0 {
            json!({ "channel": c, "file": file, "kind": "raw",
                    "norm_min": min, "norm_max": max })
        } else {
            let k = &bank.kernels()[c - 1];
            json!({ "channel": c, "file": file, "kind": "kernel",
                    "size": k.size(), "aspect": aspect_tag(k.aspect()),
                    "red_cells": k.n_red(), "blue_cells": k.n_blue(),
                    "norm_min": min, "norm_max": max })
        };
        outputs.push(file);
        channels.push(meta);
    }
    write_json(&out.join("channels.json"), &json!({ "channels": channels }))?;
    outputs.push("channels.json".into());
    write_run_manifest(&out, "enhance", &resolved, &[cfg.input.clone()], &outputs, started)?;
    println!(
        "wrote {} response channels to {}",
        1 + bank.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// separate / translate / compose
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SeparateConfig {
    image: String,
    mask: String,
    out: String,
}

impl Default for SeparateConfig {
    fn default() -> Self {
        SeparateConfig {
            image: "image.pgm".into(),
            mask: "mask.pgm".into(),
            out: "separate-out".into(),
        }
    }
}

fn run_separate(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<SeparateConfig>("separate", args)?;
    let item = LabeledImage::new(read_pgm(&cfg.image)?, read_mask_pgm(&cfg.mask)?)?;
    let background = separate_background(&item)?;
    let out = ensure_out_dir(&cfg.out)?;
    write_pgm(&background, out.join("background.pgm"), 65535)?;
    write_run_manifest(
        &out,
        "separate",
        &resolved,
        &[cfg.image.clone(), cfg.mask.clone()],
        &["background.pgm".into()],
        started,
    )?;
    println!("wrote {}", out.join("background.pgm").display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TranslateConfig {
    input: String,
    /// Histogram-matching reference image; null to skip matching.
    reference: Option<String>,
    sigma_row: f64,
    sigma_px: f64,
    seed: u64,
    out: String,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        TranslateConfig {
            input: "input.pgm".into(),
            reference: None,
            sigma_row: 0.02,
            sigma_px: 0.02,
            seed: 0,
            out: "translate-out".into(),
        }
    }
}

fn run_translate(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<TranslateConfig>("translate", args)?;
    let image = read_pgm(&cfg.input)?;
    let reference = cfg.reference.as_deref().map(read_pgm).transpose()?;
    let params = SurrogateParams {
        reference,
        sigma_row: cfg.sigma_row,
        sigma_px: cfg.sigma_px,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let translated = translate_surrogate(&image, &params, &mut rng)?;
    let out = ensure_out_dir(&cfg.out)?;
    write_pgm(&translated, out.join("translated.pgm"), 65535)?;
    let mut inputs = vec![cfg.input.clone()];
    if let Some(r) = &cfg.reference {
        inputs.push(r.clone());
    }
    write_run_manifest(
        &out,
        "translate",
        &resolved,
        &inputs,
        &["translated.pgm".into()],
        started,
    )?;
    println!("wrote {}", out.join("translated.pgm").display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ComposeConfig {
    background: String,
    image: String,
    mask: String,
    out: String,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        ComposeConfig {
            background: "background.pgm".into(),
            image: "image.pgm".into(),
            mask: "mask.pgm".into(),
            out: "compose-out".into(),
        }
    }
}

fn run_compose(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<ComposeConfig>("compose", args)?;
    let background = read_pgm(&cfg.background)?;
    let item = LabeledImage::new(read_pgm(&cfg.image)?, read_mask_pgm(&cfg.mask)?)?;
    let composed = compose(&background, &item)?;
    let out = ensure_out_dir(&cfg.out)?;
    write_pgm(&composed, out.join("composed.pgm"), 65535)?;
    write_run_manifest(
        &out,
        "compose",
        &resolved,
        &[cfg.background.clone(), cfg.image.clone(), cfg.mask.clone()],
        &["composed.pgm".into()],
        started,
    )?;
    println!("wrote {}", out.join("composed.pgm").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainCliConfig {
    manifest: String,
    out: String,
    // network
    head: HeadKind,
    input_channels: usize,
    widths: Vec<usize>,
    blocks_per_stage: usize,
    aspp_rates: Vec<usize>,
    aspp_global_pool: bool,
    net_seed: u64,
    // optimization
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    optimizer: OptimizerKind,
    pos_weight: PosWeight,
    seed: u64,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let tr = TrainConfig::default();
        TrainCliConfig {
            manifest: "gen-out/manifest.json".into(),
            out: "train-out".into(),
            head: net.head,
            input_channels: net.input_channels,
            widths: net.widths,
            blocks_per_stage: net.blocks_per_stage,
            aspp_rates: net.aspp_rates,
            aspp_global_pool: net.aspp_global_pool,
            net_seed: net.seed,
            epochs: tr.epochs,
            batch_size: tr.batch_size,
            learning_rate: tr.learning_rate,
            optimizer: tr.optimizer,
            pos_weight: tr.pos_weight,
            seed: tr.seed,
        }
    }
}

impl TrainCliConfig {
    fn net_config(&self) -> NetConfig {
        NetConfig {
            input_channels: self.input_channels,
            widths: self.widths.clone(),
            blocks_per_stage: self.blocks_per_stage,
            aspp_rates: self.aspp_rates.clone(),
            aspp_global_pool: self.aspp_global_pool,
            head: self.head,
            seed: self.net_seed,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            pos_weight: self.pos_weight,
            seed: self.seed,
        }
    }
}

fn run_train(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<TrainCliConfig>("train", args)?;
    let items = load_manifest_items(&cfg.manifest)?;
    let mut net = build_network(cfg.net_config())?;
    let report = train(&mut net, &items, &cfg.train_config())?;
    let out = ensure_out_dir(&cfg.out)?;
    save_network(&net, out.join("checkpoint"))?;
    write_json(&out.join("train_report.json"), &report)?;
    write_run_manifest(
        &out,
        "train",
        &resolved,
        &[cfg.manifest.clone()],
        &["checkpoint/".into(), "train_report.json".into()],
        started,
    )?;
    println!(
        "trained {} epochs on {} items, final loss {:.6}, checkpoint at {}",
        report.epochs_run,
        items.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.join("checkpoint").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// infer / eval
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct InferConfig {
    checkpoint: String,
    input: String,
    out: String,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            checkpoint: "train-out/checkpoint".into(),
            input: "input.pgm".into(),
            out: "infer-out".into(),
        }
    }
}

fn run_infer(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<InferConfig>("infer", args)?;
    let net = load_network(&cfg.checkpoint)?;
    let image = read_pgm(&cfg.input)?;
    let (map, mask) = infer(&net, &image)?;
    let over = segnet::overlay(&image, &mask)?;
    let out = ensure_out_dir(&cfg.out)?;
    write_pgm(&map.p_t, out.join("likelihood.pgm"), 65535)?;
    write_mask_pgm(&mask, out.join("mask.pgm"))?;
    write_pgm(&over, out.join("overlay.pgm"), 65535)?;
    write_run_manifest(
        &out,
        "infer",
        &resolved,
        &[cfg.checkpoint.clone(), cfg.input.clone()],
        &["likelihood.pgm".into(), "mask.pgm".into(), "overlay.pgm".into()],
        started,
    )?;
    println!(
        "predicted {} target pixels; outputs in {}",
        mask.target_count(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    checkpoint: String,
    manifest: String,
    out: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: "train-out/checkpoint".into(),
            manifest: "gen-out/manifest.json".into(),
            out: "eval-out".into(),
        }
    }
}

fn run_eval(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<EvalConfig>("eval", args)?;
    let net = load_network(&cfg.checkpoint)?;
    let items = load_manifest_items(&cfg.manifest)?;
    let report = evaluate_network(&net, &items)?;
    let out = ensure_out_dir(&cfg.out)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_run_manifest(
        &out,
        "eval",
        &resolved,
        &[cfg.checkpoint.clone(), cfg.manifest.clone()],
        &["metrics.json".into()],
        started,
    )?;
    println!(
        "pooled mIOU {:?} over {} items; metrics at {}",
        report.pooled.miou,
        items.len(),
        out.join("metrics.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// kfold
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct KfoldConfig {
    manifest: String,
    out: String,
    k: usize,
    split_seed: u64,
    // network
    head: HeadKind,
    input_channels: usize,
    widths: Vec<usize>,
    blocks_per_stage: usize,
    aspp_rates: Vec<usize>,
    aspp_global_pool: bool,
    net_seed: u64,
    // optimization
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    optimizer: OptimizerKind,
    pos_weight: PosWeight,
    seed: u64,
}

impl Default for KfoldConfig {
    fn default() -> Self {
        let t = TrainCliConfig::default();
        KfoldConfig {
            manifest: t.manifest,
            out: "kfold-out".into(),
            k: 4,
            split_seed: 0,
            head: t.head,
            input_channels: t.input_channels,
            widths: t.widths,
            blocks_per_stage: t.blocks_per_stage,
            aspp_rates: t.aspp_rates,
            aspp_global_pool: t.aspp_global_pool,
            net_seed: t.net_seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            pos_weight: t.pos_weight,
            seed: t.seed,
        }
    }
}

fn run_kfold(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<KfoldConfig>("kfold", args)?;
    let items = load_manifest_items(&cfg.manifest)?;
    let net_config = NetConfig {
        input_channels: cfg.input_channels,
        widths: cfg.widths.clone(),
        blocks_per_stage: cfg.blocks_per_stage,
        aspp_rates: cfg.aspp_rates.clone(),
        aspp_global_pool: cfg.aspp_global_pool,
        head: cfg.head,
        seed: cfg.net_seed,
    };
    let train_config = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        optimizer: cfg.optimizer,
        pos_weight: cfg.pos_weight,
        seed: cfg.seed,
    };
    let mut fold_no = 0;
    let cv = cross_validate(items.len(), cfg.k, cfg.split_seed, |train_idx, test_idx| {
        fold_no += 1;
        let train_items: Vec<LabeledImage> =
            train_idx.iter().map(|&i| items[i].clone()).collect();
        let test_items: Vec<LabeledImage> = test_idx.iter().map(|&i| items[i].clone()).collect();
        let mut net = build_network(net_config.clone())?;
        train(&mut net, &train_items, &train_config)?;
        let report = evaluate_network(&net, &test_items)?;
        eprintln!(
            "fold {fold_no}/{}: test mIOU {:?}",
            cfg.k, report.pooled.miou
        );
        Ok(report.pooled)
    })?;
    let out = ensure_out_dir(&cfg.out)?;
    write_json(&out.join("metrics.json"), &cv)?;
    write_run_manifest(
        &out,
        "kfold",
        &resolved,
        &[cfg.manifest.clone()],
        &["metrics.json".into()],
        started,
    )?;
    println!(
        "{}-fold averaged mIOU {:?}; metrics at {}",
        cfg.k,
        cv.averaged.miou,
        out.join("metrics.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GradcheckConfig {
    seed: u64,
    out: String,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            out: "gradcheck-out".into(),
        }
    }
}

#[derive(Serialize)]
struct CheckOutcome {
    name: String,
    max_rel_err: f64,
    tolerance: f64,
    pass: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("shape is valid")
}

/// Finite-difference verification of every differentiable building block,
/// plus one end-to-end pass through a full (free-head) network.
fn run_gradcheck(args: &[String]) -> CliResult<()> {
    let started = Instant::now();
    let (cfg, resolved) = resolve_config::<GradcheckConfig>("gradcheck", args)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layer_tol = 1e-4;
    let mut checks: Vec<CheckOutcome> = Vec::new();

    // Generic scalar readout so non-scalar ops can be checked.
    let readout = rand_tensor(&mut rng, [1, 2, 6, 6], 1.0);
    let x_small = rand_tensor(&mut rng, [1, 2, 6, 6], 1.0);
    let conv_w = rand_tensor(&mut rng, [3, 2, 3, 3], 0.5);
    let conv_b = rand_tensor(&mut rng, [1, 3, 1, 1], 0.5);
    let conv_out_readout = rand_tensor(&mut rng, [1, 3, 6, 6], 1.0);

    let push = |checks: &mut Vec<CheckOutcome>,
                    name: &str,
                    result: tirdet_core::Result<tirdet_core::nn::gradcheck::GradCheck>,
                    tol: f64|
     -> CliResult<()> {
        let gc = result?;
        checks.push(CheckOutcome {
            name: name.into(),
            max_rel_err: gc.max_rel_err,
            tolerance: tol,
            pass: gc.max_rel_err < tol,
        });
        Ok(())
    };

    push(
        &mut checks,
        "conv2d/input",
        check_input_gradient(
            |tape, x| {
                let w = tape.leaf(conv_w.clone());
                let b = tape.leaf(conv_b.clone());
                let y = tape.conv2d(x, w, b, 1, 1, 1)?;
                tape.weighted_sum(y, &conv_out_readout)
            },
            &x_small,
            DEFAULT_STEP,
        ),
        layer_tol,
    )?;
    push(
        &mut checks,
        "conv2d/weight",
        check_input_gradient(
            |tape, w| {
                let x = tape.leaf(x_small.clone());
                let b = tape.leaf(conv_b.clone());
                let y = tape.conv2d(x, w, b, 1, 1, 1)?;
                tape.weighted_sum(y, &conv_out_readout)
            },
            &conv_w,
            DEFAULT_STEP,
        ),
        layer_tol,
    )?;
    push(
        &mut checks,
        "conv2d/bias",
        check_input_gradient(
            |tape, b| {
                let x = tape.leaf(x_small.clone());
                let w = tape.leaf(conv_w.clone());
                let y = tape.conv2d(x, w, b, 1, 1, 1)?;
                tape.weighted_sum(y, &conv_out_readout)
            },
            &conv_b,
            DEFAULT_STEP,
        ),
        layer_tol,
    )?;

    // Keep relu inputs away from the kink so central differences are valid.
    let mut relu_in = rand_tensor(&mut rng, [1, 2, 6, 6], 1.0);
    for v in relu_in.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v + f64::MIN_POSITIVE);
        }
    }
    push(
        &mut checks,
        "relu",
        check_input_gradient(
            |tape, x| {
                let y = tape.relu(x)?;
                tape.weighted_sum(y, &readout)
            },
            &relu_in,
            DEFAULT_STEP,
        ),
        layer_tol,
    )?;

    let other = rand_tensor(&mut rng, [1, 2, 6, 6], 1.0);
    push(
        &mut checks,
        "add",
        check_input_gradient(
            |tape, x| {
                let y = tape.leaf(other.clone());
                let s = tape.add(x, y)?;
                tape.weighted_sum(s, &readout)
            },
            &x_small,
            DEFAULT_STEP,
        ),
        layer_tol,
    )?;

    let concat_readout = rand_tensor(&mut rng, [1, 4, 6, 6], 1.0);
    push(
        &mut checks,
        "concat_channels",
        check_input_gradient(
            |tape, x| {
                let y = tape.leaf(other.clone());
                let c = tape.concat_channels(&[x, y])?;
                tape.weighted_sum(c, &concat_readout)
            },
            &x_small,
            DEFAULT_STEP,
        ),
        layer_tol,
    )?;

    push(
        &mut checks,
        "avg_pool_global",
        check_input_gradient(
            |tape, x| {
                let p = tape.avg_pool_global(x)?;
                tape.weighted_sum(p, &readout)
            },
            &x_small,
            DEFAULT_STEP,
        ),
        layer_tol,
    )?;

    let up_readout = rand_tensor(&mut rng, [1, 2, 12, 12], 1.0);
    push(
        &mut checks,
        "upsample_nearest",
        check_input_gradient(
            |tape, x| {
                let u = tape.upsample_nearest(x, 2)?;
                tape.weighted_sum(u, &up_readout)
            },
            &x_small,
            DEFAULT_STEP,
        ),
        layer_tol,
    )?;

    let logits = rand_tensor(&mut rng, [1, 2, 6, 6], 1.0);
    let target_data: Vec<f64> = (0..36).map(|i| f64::from(i % 3 == 0)).collect();
    let targets = Tensor::new([1, 1, 6, 6], target_data).expect("valid shape");
    push(
        &mut checks,
        "softmax2+bce_loss",
        check_input_gradient(
            |tape, x| {
                let p = tape.softmax2(x)?;
                tape.bce_loss(p, &targets, 3.0)
            },
            &logits,
            DEFAULT_STEP,
        ),
        layer_tol,
    )?;

    // End-to-end: a full free-head network on an 8×8 scene, ≥100 sampled
    // parameters against central differences.
    let full = full_network_check(cfg.seed)?;
    checks.push(CheckOutcome {
        name: "full_network".into(),
        max_rel_err: full,
        tolerance: 1e-3,
        pass: full < 1e-3,
    });

    let all_passed = checks.iter().all(|c| c.pass);
    let out = ensure_out_dir(&cfg.out)?;
    write_json(
        &out.join("gradcheck.json"),
        &json!({ "checks": checks, "all_passed": all_passed }),
    )?;
    write_run_manifest(
        &out,
        "gradcheck",
        &resolved,
        &[],
        &["gradcheck.json".into()],
        started,
    )?;
    for c in &checks {
        println!(
            "{:\u{20}<20} max rel err {:.3e} (tolerance {:.0e}) {}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            if c.pass { "ok" } else { "FAIL" }
        );
    }
    if all_passed {
        Ok(())
    } else {
        Err(CliError::Core(CoreError::NumericContract(
            "gradient check failed; see gradcheck.json".into(),
        )))
    }
}

/// Max relative error of the analytic loss gradient vs central differences
/// over 110 sampled parameters of a full free-head network on 8×8 input.
fn full_network_check(seed: u64) -> CliResult<f64> {
    let mut net = build_network(NetConfig {
        head: HeadKind::Free,
        seed,
        ..Default::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd_1234);
    for p in net.params_mut() {
        *p = rng.gen_range(-0.2..0.2);
    }
    let image_data: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = Image::new(8, 8, image_data).map_err(CliError::Core)?;
    let mut mask_data = vec![0u8; 64];
    mask_data[19] = 1;
    mask_data[20] = 1;
    mask_data[42] = 1;
    let mask = Mask::new(8, 8, mask_data).map_err(CliError::Core)?;
    let item = LabeledImage::new(image, mask)?;
    let pos_weight = 2.0;

    let (_, analytic) = net.loss_and_grad(&[&item], pos_weight)?;
    let n = net.n_params();
    let step = DEFAULT_STEP;
    let mut worst = 0.0f64;
    for _ in 0..110 {
        let i = rng.gen_range(0..n);
        let orig = net.params()[i];
        net.params_mut()[i] = orig + step;
        let (up, _) = net.loss_and_grad(&[&item], pos_weight)?;
        net.params_mut()[i] = orig - step;
        let (down, _) = net.loss_and_grad(&[&item], pos_weight)?;
        net.params_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Help
// ---------------------------------------------------------------------------

fn print_global_help() {
    println!(
        "tirdet {VERSION} — thermal-infrared small-target detection pipeline

USAGE: tirdet <subcommand> [--config file.json] [--key value]...

Subcommands:
  gen        generate a labeled synthetic scene dataset
  enhance    write the center-surround response channels of one image
  separate   replace target pixels with row background estimates
  translate  apply the surrogate style translation to one image
  compose    paste original target pixels onto a translated background
  train      train the segmentation network on a dataset manifest
  infer      run one image through a checkpoint (likelihood, mask, overlay)
  eval       score a checkpoint against a labeled dataset
  kfold      k-fold cross-validation: split, train per fold, average
  gradcheck  finite-difference verification of all gradients

Configuration: defaults < --config JSON file < --key value overrides.
Unknown keys are an error. `--config` also accepts a previous run's
run_manifest.json and reruns it. `tirdet <subcommand> --help` lists every
key with its default.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric violation."
    );
}

fn key_help(sub: &str, key: &str) -> &'static str {
    match (sub, key) {
        (_, "out") => "output directory",
        (_, "seed") if sub == "gen" => "master seed; per-item seeds derive from it",
        (_, "seed") if sub == "translate" => "seed for the translation noise",
        (_, "seed") if sub == "gradcheck" => "seed for sampled tensors and parameters",
        (_, "seed") => "mini-batch shuffling seed",
        ("gen", "width") => "scene width in pixels",
        ("gen", "height") => "scene height in pixels",
        ("gen", "n_targets") => "targets per scene",
        ("gen", "target_extent") => "target diameter in pixels (1..=7)",
        ("gen", "target_snr") => "requested SNR; jittered ±30% per item",
        ("gen", "clutter_amplitude") => "sinusoidal wave clutter amplitude",
        ("gen", "clutter_wavelength") => "wave clutter wavelength in pixels",
        ("gen", "row_noise_sigma") => "per-row offset noise sigma",
        ("gen", "pixel_noise_sigma") => "per-pixel noise sigma",
        ("gen", "horizon_gradient") => "top-to-bottom intensity ramp",
        ("gen", "count") => "number of scenes to generate",
        ("enhance", "input") => "input PGM image",
        ("separate", "image") => "input PGM image",
        ("separate", "mask") => "binary PGM target mask",
        ("translate", "input") => "input PGM image",
        ("translate", "reference") => "histogram-matching reference PGM, or null",
        ("translate", "sigma_row") => "row-correlated noise sigma",
        ("translate", "sigma_px") => "per-pixel noise sigma",
        ("compose", "background") => "translated background PGM",
        ("compose", "image") => "original PGM image holding the targets",
        ("compose", "mask") => "binary PGM target mask",
        (_, "manifest") => "dataset manifest JSON (image/mask path pairs)",
        (_, "checkpoint") => "checkpoint directory",
        (_, "input") => "input PGM image",
        (_, "head") => "\"fixed\" (frozen kernels) or \"free\" (trainable)",
        (_, "input_channels") => "head output channels (raw + kernels)",
        (_, "widths") => "encoder stage widths, e.g. [16,32,64]",
        (_, "blocks_per_stage") => "residual blocks per stage",
        (_, "aspp_rates") => "ASPP dilation rates, e.g. [1,2,4,8]",
        (_, "aspp_global_pool") => "include the global-average ASPP branch",
        (_, "net_seed") => "weight initialization seed",
        (_, "epochs") => "training epochs",
        (_, "batch_size") => "mini-batch size",
        (_, "learning_rate") => "optimizer step size",
        (_, "optimizer") => "\"adam\" or \"sgd\"",
        (_, "pos_weight") => "target-class loss weight, number or \"auto\"",
        ("kfold", "k") => "number of folds",
        ("kfold", "split_seed") => "fold assignment shuffling seed",
        _ => "",
    }
}

fn default_config_value(sub: &str) -> Value {
    match sub {
        "gen" => serde_json::to_value(GenConfig::default()),
        "enhance" => serde_json::to_value(EnhanceConfig::default()),
        "separate" => serde_json::to_value(SeparateConfig::default()),
        "translate" => serde_json::to_value(TranslateConfig::default()),
        "compose" => serde_json::to_value(ComposeConfig::default()),
        "train" => serde_json::to_value(TrainCliConfig::default()),
        "infer" => serde_json::to_value(InferConfig::default()),
        "eval" => serde_json::to_value(EvalConfig::default()),
        "kfold" => serde_json::to_value(KfoldConfig::default()),
        "gradcheck" => serde_json::to_value(GradcheckConfig::default()),
        _ => unreachable!("validated subcommand"),
    }
    .expect("default configs serialize")
}

fn print_subcommand_help(sub: &str) {
    let blurb = match sub {
        "gen" => "Generate a labeled synthetic scene dataset (images/, masks/, manifest.json).",
        "enhance" => "Write each center-surround response channel of one image as a normalized PGM plus a channels.json sidecar.",
        "separate" => "Replace target pixels with per-row background estimates (background.pgm).",
        "translate" => "Apply the surrogate style translation to one image (translated.pgm).",
        "compose" => "Paste the original target pixels onto a translated background (composed.pgm).",
        "train" => "Train the segmentation network on a dataset manifest; writes checkpoint/ and train_report.json.",
        "infer" => "Run one image through a checkpoint; writes likelihood.pgm, mask.pgm, overlay.pgm.",
        "eval" => "Score a checkpoint against a labeled dataset; writes metrics.json.",
        "kfold" => "k-fold cross-validation: split, train each fold, average metrics; writes metrics.json.",
        "gradcheck" => "Finite-difference verification of every layer and a full network; writes gradcheck.json.",
        _ => unreachable!("validated subcommand"),
    };
    println!("tirdet {sub} — {blurb}\n");
    println!("USAGE: tirdet {sub} [--config file.json] [--key value]...\n");
    println!("Keys (with defaults):");
    let Value::Object(map) = default_config_value(sub) else {
        unreachable!("configs are objects");
    };
    let width = map.keys().map(String::len).max().unwrap_or(0);
    for (key, default) in &map {
        let desc = key_help(sub, key);
        println!("  --{key:width$}  {default}  {desc}");
    }
    println!("\nEvery run writes run_manifest.json into --out.");
}
