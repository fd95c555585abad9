//! `spcnn` command implementations.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use spcnn_core::checkpoint::{load_checkpoint, save_checkpoint};
use spcnn_core::data::{gen_synthetic, load_dataset, prepare_tuples, read_centers, save_dataset, split_half, SyntheticConfig};
use spcnn_core::detect::{
    detect, evaluate, pr_sweep, read_detections_csv, threshold_grid, write_detections_csv, write_pr_csv, Averaging,
    Detection, SweepOptions, DEFAULT_GOLDEN_RADIUS, DEFAULT_NMS_RADIUS,
};
use spcnn_core::gradcheck::{grad_check, GradCheckConfig};
use spcnn_core::network::predict;
use spcnn_core::pgm::read_pgm;
use spcnn_core::shape_prior::{generate_shape_set, load_shape_set, ShapeSet};
use spcnn_core::train::{history_csv, predict_maps, read_history_csv, train, EpochRecord, Start, TrainConfig};
use spcnn_core::{Error, Tensor};

use manifest::RunManifest;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "spcnn", version, about = "Shape-prior regularised CNN for nucleus detection")]
pub struct Cli {
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true, env = "SPCNN_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated dataset.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Detect nuclei in one image.
    Detect(DetectArgs),
    /// Score detections against ground-truth centres.
    Eval(EvalArgs),
    /// Sweep the detection threshold over a dataset.
    PrCurve(PrCurveArgs),
    /// Verify every analytic gradient against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 15)]
    pub nuclei: usize,
    /// Write the first half to `<out>/train` and the second to `<out>/test`.
    #[arg(long)]
    pub split: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset; enables the per-epoch F1 column.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// JSON training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train without the shape prior (lambda = 0).
    #[arg(long)]
    pub no_prior: bool,
    /// Continue from a checkpoint; its history.csv, if present, is extended.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Directory of template PGMs replacing the generated shape set.
    #[arg(long)]
    pub shapes: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long = "threshold", short = 'T', visible_alias = "T", default_value_t = 0.3)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_RADIUS)]
    pub nms_radius: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections CSV (`row,col,score` or `row,col`).
    #[arg(long)]
    pub detections: PathBuf,
    /// Ground-truth CSV (`row,col` or `row,col,score`).
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GOLDEN_RADIUS)]
    pub radius: f64,
    /// Ignore detections scoring below this.
    #[arg(long = "threshold", short = 'T', default_value_t = 0.0)]
    pub threshold: f64,
    /// Write the report here as JSON (it is always printed).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrCurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `start:stop:step` or a comma-separated ascending list.
    #[arg(long, default_value = "0.05:0.95:0.05")]
    pub grid: String,
    #[arg(long, default_value_t = DEFAULT_GOLDEN_RADIUS)]
    pub radius: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_RADIUS)]
    pub nms_radius: usize,
    /// Average per-image precision/recall instead of pooling counts.
    #[arg(long = "macro")]
    pub macro_average: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Prior weight in the total-loss check; 0 skips the prior rows.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    /// Negate the analytic prior gradient so the check must fail.
    #[arg(long)]
    pub force_fail: bool,
    /// Directory for the JSON report and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    GradCheckFailed,
}

impl CliError {
    /// 2 invalid arguments, 3 I/O or malformed files, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::InvalidArgument(_)) => 2,
            CliError::Core(Error::Io { .. } | Error::Format { .. }) => 3,
            CliError::Core(Error::Numeric { .. }) | CliError::GradCheckFailed => 4,
            CliError::Core(Error::InvalidState(_)) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::GradCheckFailed => f.write_str("gradient check failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::InvalidArgument(msg.into()))
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| io(path, e))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io(path, e))
}

/// `<dir>/<stem>.run_manifest.json` next to a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}.{RUN_MANIFEST}"))
}

pub fn run(cli: Cli) -> CliResult {
    if cli.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    // A second initialisation in the same process keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    match cli.command {
        Command::GenData(a) => gen_data(&a, cli.threads),
        Command::Train(a) => train_cmd(&a, cli.threads),
        Command::Detect(a) => detect_cmd(&a, cli.threads),
        Command::Eval(a) => eval_cmd(&a, cli.threads),
        Command::PrCurve(a) => pr_curve_cmd(&a, cli.threads),
        Command::GradCheck(a) => grad_check_cmd(&a, cli.threads),
    }
}

pub fn gen_data(a: &GenDataArgs, threads: usize) -> CliResult {
    let cfg = SyntheticConfig::new(a.size, a.nuclei);
    let manifest = RunManifest::begin("gen-data", json!({ "synthetic": cfg, "count": a.count, "split": a.split }), Some(a.seed), &[], threads)?;
    let images = gen_synthetic(a.seed, a.count, &cfg);
    create_dir(&a.out)?;
    let mut artifacts = Vec::new();
    if a.split {
        let (tr, te) = split_half(&images);
        for (name, set) in [("train", tr), ("test", te)] {
            let dir = a.out.join(name);
            save_dataset(&dir, &set, Some(a.seed))?;
            artifacts.push(dir);
        }
    } else {
        save_dataset(&a.out, &images, Some(a.seed))?;
        artifacts.push(a.out.clone());
    }
    log::info!("wrote {} images to {}", images.len(), a.out.display());
    RunManifest { artifacts, ..manifest }.finish(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

pub fn effective_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.width {
        cfg.network.width = v;
    }
    if a.no_prior {
        cfg.lambda = 0.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn shape_set(cfg: &TrainConfig, dir: Option<&Path>) -> CliResult<ShapeSet> {
    Ok(match dir {
        Some(d) => load_shape_set(d)?,
        None => generate_shape_set(cfg.shapes.seed, cfg.shapes.count, cfg.shapes.size)?,
    })
}

pub fn train_cmd(a: &TrainArgs, threads: usize) -> CliResult {
    let cfg = effective_config(a)?;
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.val.iter().cloned());
    inputs.extend(a.config.iter().cloned());
    inputs.extend(a.resume.iter().cloned());
    inputs.extend(a.shapes.iter().cloned());
    let config_json = serde_json::to_value(&cfg).expect("config serialises");
    let manifest = RunManifest::begin("train", config_json, Some(cfg.seed), &inputs, threads)?;

    let (_, images) = load_dataset(&a.data)?;
    let tuples = prepare_tuples(&images, &cfg.canny, cfg.patch, cfg.stride)?;
    if tuples.is_empty() {
        return Err(usage(format!("{} yields no training patches", a.data.display())));
    }
    let validation = match &a.val {
        Some(p) => Some(load_dataset(p)?.1),
        None => None,
    };
    let shapes = shape_set(&cfg, a.shapes.as_deref())?;

    let mut history: Vec<EpochRecord> = Vec::new();
    let start = match &a.resume {
        Some(ckpt) => {
            let (header, params) = load_checkpoint(ckpt)?;
            if header.layer_specs != cfg.network.layer_specs() {
                return Err(usage(format!(
                    "{} was trained with a different architecture",
                    ckpt.display()
                )));
            }
            let prev = ckpt.with_file_name("history.csv");
            if prev.exists() {
                history = read_history_csv(&prev)?;
                history.retain(|r| r.epoch <= header.epoch);
            }
            Start::Resume {
                params,
                epochs_done: header.epoch,
            }
        }
        None => Start::Fresh,
    };

    create_dir(&a.out)?;
    let ckpt_path = a.out.join("model.ckpt");
    let history_path = a.out.join("history.csv");
    write_file(
        &a.out.join("config.json"),
        &(serde_json::to_string_pretty(&cfg).expect("config serialises") + "\n"),
    )?;
    log::info!(
        "training on {} patches from {} images, {} templates, lambda {}",
        tuples.len(),
        images.len(),
        shapes.len(),
        cfg.lambda
    );
    let done = match &start {
        Start::Resume { epochs_done, .. } => *epochs_done,
        Start::Fresh => 0,
    };
    let out = train(&tuples, validation.as_deref(), &shapes, &cfg, start, |rec, params| {
        save_checkpoint(&ckpt_path, params, cfg.seed, rec.epoch)?;
        history.push(*rec);
        fs::write(&history_path, history_csv(&history)).map_err(|e| Error::Io {
            path: history_path.clone(),
            source: e,
        })
    })?;
    if out.history.is_empty() {
        save_checkpoint(&ckpt_path, &out.params, cfg.seed, done)?;
        write_file(&history_path, &history_csv(&history))?;
    }
    RunManifest {
        artifacts: vec![ckpt_path, history_path, a.out.join("config.json")],
        ..manifest
    }
    .finish(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

pub fn detect_cmd(a: &DetectArgs, threads: usize) -> CliResult {
    if !(a.threshold >= 0.0) || a.nms_radius == 0 {
        return Err(usage("threshold must be >= 0 and nms radius >= 1"));
    }
    let manifest = RunManifest::begin(
        "detect",
        json!({ "threshold": a.threshold, "nms_radius": a.nms_radius }),
        None,
        &[a.model.clone(), a.image.clone()],
        threads,
    )?;
    let (_, params) = load_checkpoint(&a.model)?;
    let img = read_pgm(&a.image)?.to_image();
    let map = predict(&params, &Tensor::from_image(&img))?.to_image(0, 0);
    let dets = detect(&map, a.threshold, a.nms_radius);
    write_detections_csv(&a.out, &dets)?;
    log::info!("{} detections written to {}", dets.len(), a.out.display());
    RunManifest {
        artifacts: vec![a.out.clone()],
        ..manifest
    }
    .finish(&sidecar(&a.out))?;
    Ok(())
}

/// Reads either a detections CSV or a centres CSV; centres score 1.
pub fn read_points(path: &Path) -> CliResult<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    match text.lines().next().map(str::trim) {
        Some("row,col,score") => Ok(read_detections_csv(path)?),
        _ => Ok(read_centers(path)?
            .into_iter()
            .map(|(row, col)| Detection { row, col, score: 1.0 })
            .collect()),
    }
}

pub fn eval_cmd(a: &EvalArgs, threads: usize) -> CliResult {
    if !(a.radius > 0.0) {
        return Err(usage("radius must be positive"));
    }
    let manifest = RunManifest::begin(
        "eval",
        json!({ "radius": a.radius, "threshold": a.threshold }),
        None,
        &[a.detections.clone(), a.gt.clone()],
        threads,
    )?;
    let dets: Vec<Detection> = read_points(&a.detections)?
        .into_iter()
        .filter(|d| d.score >= a.threshold)
        .collect();
    let gt: Vec<(usize, usize)> = read_points(&a.gt)?.iter().map(|d| (d.row, d.col)).collect();
    let report = evaluate(&dets, &gt, a.radius, a.threshold)?;
    let text = serde_json::to_string_pretty(&report).expect("report serialises");
    println!("{text}");
    let manifest_path = match &a.out {
        Some(out) => {
            write_file(out, &(text + "\n"))?;
            sidecar(out)
        }
        None => PathBuf::from(format!("eval.{RUN_MANIFEST}")),
    };
    RunManifest {
        artifacts: a.out.iter().cloned().collect(),
        ..manifest
    }
    .finish(&manifest_path)?;
    Ok(())
}

/// Parses `start:stop:step` or `a,b,c`.
pub fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| usage(format!("bad threshold {t:?} in grid {s:?}")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    let grid = match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || b < a {
                return Err(usage(format!("grid {s:?} needs start <= stop and step > 0")));
            }
            threshold_grid(a, b, step)
        }
        [_] => s.split(',').map(num).collect::<CliResult<Vec<f64>>>()?,
        _ => return Err(usage(format!("cannot parse grid {s:?}"))),
    };
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(usage(format!("grid {s:?} must be non-empty and strictly ascending")));
    }
    Ok(grid)
}

fn gnuplot_script(csv_name: &str) -> String {
    format!(
        r#"set datafile separator ","
set key autotitle columnhead
set terminal pngcairo size 960,420
set output "pr_curve.png"
set multiplot layout 1,2
set xlabel "recall"
set ylabel "precision"
set xrange [0:1]
set yrange [0:1]
plot "{csv_name}" using 3:2 with linespoints title "precision-recall"
set xlabel "threshold"
set ylabel "F1"
set autoscale x
plot "{csv_name}" using 1:4 with linespoints title "F1"
unset multiplot
"#
    )
}

pub fn pr_curve_cmd(a: &PrCurveArgs, threads: usize) -> CliResult {
    let grid = parse_grid(&a.grid)?;
    let averaging = if a.macro_average { Averaging::Macro } else { Averaging::Micro };
    let opts = SweepOptions {
        nms_radius: a.nms_radius,
        golden_radius: a.radius,
        averaging,
    };
    let manifest = RunManifest::begin(
        "pr-curve",
        json!({ "grid": grid, "radius": a.radius, "nms_radius": a.nms_radius, "macro": a.macro_average }),
        None,
        &[a.model.clone(), a.data.clone()],
        threads,
    )?;
    let (_, params) = load_checkpoint(&a.model)?;
    let (_, images) = load_dataset(&a.data)?;
    if images.is_empty() {
        return Err(usage(format!("{} contains no images", a.data.display())));
    }
    let maps = predict_maps(&params, &images)?;
    let gt: Vec<Vec<(usize, usize)>> = images.iter().map(|i| i.centers.clone()).collect();
    let curve = pr_sweep(&maps, &gt, &grid, &opts)?;
    create_dir(&a.out)?;
    let csv = a.out.join("pr_curve.csv");
    let script = a.out.join("pr_curve.gp");
    write_pr_csv(&csv, &curve)?;
    write_file(&script, &gnuplot_script("pr_curve.csv"))?;
    if let Some(b) = curve.best() {
        println!(
            "best F1 {:.4} at T={} (P={:.4}, R={:.4})",
            b.f1, b.threshold, b.precision, b.recall
        );
    }
    RunManifest {
        artifacts: vec![csv, script],
        ..manifest
    }
    .finish(&a.out.join(RUN_MANIFEST))?;
    Ok(())
}

pub fn grad_check_cmd(a: &GradCheckArgs, threads: usize) -> CliResult {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if a.force_fail && a.lambda == 0.0 {
        return Err(usage("--force-fail needs a nonzero --lambda"));
    }
    let cfg = GradCheckConfig {
        seeds: (0..a.seeds).collect(),
        lambda: a.lambda,
        flip_prior_sign: a.force_fail,
        ..GradCheckConfig::default()
    };
    let manifest = RunManifest::begin(
        "grad-check",
        json!({ "seeds": a.seeds, "lambda": a.lambda, "force_fail": a.force_fail, "eps": cfg.eps, "tolerance": cfg.tolerance }),
        None,
        &[],
        threads,
    )?;
    let report = grad_check(&cfg)?;
    print!("{}", report.to_table());
    let (manifest_path, artifacts) = match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            let p = dir.join("grad_check.json");
            write_file(&p, &(serde_json::to_string_pretty(&report).expect("report serialises") + "\n"))?;
            (dir.join(RUN_MANIFEST), vec![p])
        }
        None => (PathBuf::from(format!("grad_check.{RUN_MANIFEST}")), Vec::new()),
    };
    RunManifest { artifacts, ..manifest }.finish(&manifest_path)?;
    if report.passed() {
        println!("all components within {:e}", report.tolerance);
        Ok(())
    } else {
        Err(CliError::GradCheckFailed)
    }
}
