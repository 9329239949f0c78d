//! Command implementations behind the `pclsr` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pclsr::checkpoint::Checkpoint;
use pclsr::datapipe::{bicubic_upscale, load_benchmark, load_png, materialize_lr, save_png, Benchmark, TrainingSet};
use pclsr::metrics::{evaluate_dataset, EvalReport, Quantize};
use pclsr::sampling::{make_negatives_traced, make_sharpened_traced, KernelSpec};
use pclsr::spectral::haar_forward;
use pclsr::tensor::{batch_from_images, image_from_batch};
use pclsr::trainer::{train, upscale_image, TrainConfig};
use pclsr::{Error, Image, RandomSource};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;

pub const DATA_ROOT_VAR: &str = "PCLSR_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "pclsr", version, about = "Contrastive-loss super-resolution: training, evaluation and data tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an SR network (optionally with the contrastive term).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a benchmark set.
    Eval(EvalArgs),
    /// Evaluate plain bicubic upscaling on a benchmark set.
    Baseline(BaselineArgs),
    /// Write bicubic LR images next to a dataset's HR folder.
    Degrade(DegradeArgs),
    /// Write the positive and negative samples drawn for one image.
    AugmentPreview(AugmentArgs),
    /// Write the four Haar subbands of an image.
    Wavelet(WaveletArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat JSON training configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `key=value` config overrides, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// set5, set14, b100, urban100, manga109 or a directory.
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// Border pixels excluded from the metrics (default: the scale).
    #[arg(long)]
    pub shave: Option<usize>,
    /// Round outputs to 8 bits before scoring.
    #[arg(long)]
    pub quantize: bool,
    /// Report directory (receives report.csv).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// HR PNG.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub k_pos: usize,
    #[arg(long, default_value_t = 4)]
    pub k_neg: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct WaveletArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Json(_) => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::SchemaVersion { .. } => EXIT_SCHEMA,
        _ => EXIT_FAILURE,
    }
}

/// Runs a parsed command, printing errors to stderr.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Baseline(a) => cmd_baseline(&a).map(|_| ()),
        Command::Degrade(a) => cmd_degrade(&a),
        Command::AugmentPreview(a) => cmd_augment_preview(&a),
        Command::Wavelet(a) => cmd_wavelet(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// `--data-root`, else `$PCLSR_DATA_ROOT`, else `./data`.
pub fn data_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> pclsr::Result<()> {
    let occupied = dir.is_dir() && std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> pclsr::Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// The configuration a `train` invocation resolves to.
pub fn resolve_train_config(a: &TrainArgs) -> pclsr::Result<TrainConfig> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", a.config.display())))?;
    let mut cfg = TrainConfig::from_json(&text)?;
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> pclsr::Result<()> {
    let cfg = resolve_train_config(a)?;
    let dir = cfg
        .train_dir
        .as_ref()
        .ok_or_else(|| Error::Config("config has no train_dir".into()))?;
    let dir = if dir.is_absolute() { dir.clone() } else { data_root(a.data_root.as_deref()).join(dir) };
    let data = TrainingSet::from_dir(&dir, cfg.scale)?;
    if a.resume.is_none() {
        prepare_out_dir(&a.out, a.force)?;
    }
    let out = train(&cfg, &data, &a.out, a.resume.as_deref())?;
    if let Some(last) = out.records.last() {
        println!("step={} l1={:.6} lcl={:.6} total={:.6}", last.step, last.l1, last.lcl, last.total);
    }
    Ok(())
}

fn open_dataset(d: &DatasetArgs) -> pclsr::Result<pclsr::datapipe::PairedDataset> {
    load_benchmark(&data_root(d.data_root.as_deref()), &Benchmark::parse(&d.dataset), d.scale)
}

fn finish_report(d: &DatasetArgs, report: &EvalReport) -> pclsr::Result<()> {
    prepare_out_dir(&d.out, d.force)?;
    write_text(&d.out.join("report.csv"), &report.to_csv())?;
    println!("{}", report.summary_line());
    Ok(())
}

fn quantize_mode(d: &DatasetArgs) -> Quantize {
    if d.quantize {
        Quantize::On
    } else {
        Quantize::Off
    }
}

pub fn cmd_eval(a: &EvalArgs) -> pclsr::Result<EvalReport> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg: TrainConfig =
        serde_json::from_value(ck.config.clone()).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    if cfg.scale != a.data.scale {
        return Err(Error::Config(format!("checkpoint is x{}, dataset requested at x{}", cfg.scale, a.data.scale)));
    }
    let sr = ck.tensors.subset("sr.");
    let ds = open_dataset(&a.data)?;
    let report = evaluate_dataset(&ds, a.data.shave.unwrap_or(a.data.scale), quantize_mode(&a.data), |lr| {
        upscale_image(&sr, &cfg.sr_config(), lr)
    })?;
    finish_report(&a.data, &report)?;
    Ok(report)
}

pub fn cmd_baseline(a: &BaselineArgs) -> pclsr::Result<EvalReport> {
    let d = &a.data;
    let ds = open_dataset(d)?;
    let report = evaluate_dataset(&ds, d.shave.unwrap_or(d.scale), quantize_mode(d), |lr| bicubic_upscale(lr, d.scale))?;
    finish_report(d, &report)?;
    Ok(report)
}

pub fn cmd_degrade(a: &DegradeArgs) -> pclsr::Result<()> {
    let bench = Benchmark::parse(&a.dataset);
    let dir = bench.dir(&data_root(a.data_root.as_deref()));
    let written = materialize_lr(&dir, a.scale, a.force)?;
    println!("wrote {} LR images to {}", written.len(), dir.join(format!("LR_x{}", a.scale)).display());
    Ok(())
}

#[derive(Serialize)]
struct SampleEntry {
    file: String,
    /// `None` for the unmodified ground truth.
    kernel: Option<KernelSpec>,
}

#[derive(Serialize)]
struct AugmentManifest {
    input: String,
    seed: u64,
    positives: Vec<SampleEntry>,
    negatives: Vec<SampleEntry>,
}

pub fn cmd_augment_preview(a: &AugmentArgs) -> pclsr::Result<()> {
    let hr = load_png(&a.input)?;
    prepare_out_dir(&a.out, a.force)?;
    let mut rng = RandomSource::seed_from(a.seed);
    let sharpened = make_sharpened_traced(&hr, a.k_pos, &mut rng)?;
    let negatives = make_negatives_traced(&hr, a.k_neg, &mut rng)?;
    let mut manifest = AugmentManifest {
        input: a.input.display().to_string(),
        seed: a.seed,
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    let positives = std::iter::once((None, hr.clone())).chain(sharpened.into_iter().map(|(k, img)| (Some(k), img)));
    for (j, (kernel, img)) in positives.enumerate() {
        let file = format!("positives_{j}.png");
        save_png(&a.out.join(&file), &img)?;
        manifest.positives.push(SampleEntry { file, kernel });
    }
    for (j, (kernel, img)) in negatives.into_iter().enumerate() {
        let file = format!("negatives_{j}.png");
        save_png(&a.out.join(&file), &img)?;
        manifest.negatives.push(SampleEntry {
            file,
            kernel: Some(kernel),
        });
    }
    write_text(&a.out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))
}

/// How a subband was mapped to `[0, 255]`: `pixel = (value - min) · scale`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SubbandScaling {
    pub file: String,
    pub min: f64,
    pub max: f64,
    pub scale: f64,
}

fn rescale_for_display(band: &Image) -> (Image, f64, f64, f64) {
    let min = band.iter().copied().fold(f64::INFINITY, f64::min);
    let max = band.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
    (band.mapv(|v| (v - min) * scale / 255.0), min, max, scale)
}

pub fn cmd_wavelet(a: &WaveletArgs) -> pclsr::Result<()> {
    let img = load_png(&a.input)?;
    let (h, w, _) = img.dim();
    let img = pclsr::tensor::crop_to_multiple(img.view(), 2);
    if img.dim().0 != h || img.dim().1 != w {
        log::warn!("odd-sized input cropped to {:?}", img.dim());
    }
    let bands = haar_forward(&batch_from_images(&[img])?)?;
    prepare_out_dir(&a.out, a.force)?;
    let mut sidecar = Vec::new();
    for (name, band) in [("LL", &bands.ll), ("LH", &bands.lh), ("HL", &bands.hl), ("HH", &bands.hh)] {
        let (vis, min, max, scale) = rescale_for_display(&image_from_batch(band, 0));
        let file = format!("{name}.png");
        save_png(&a.out.join(&file), &vis)?;
        sidecar.push(SubbandScaling { file, min, max, scale });
    }
    write_text(&a.out.join("subbands.json"), &(serde_json::to_string_pretty(&sidecar)? + "\n"))
}
