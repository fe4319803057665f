//! Command-line front end. [`run`] parses arguments, executes one command
//! and returns the process exit code.

pub mod bench;
pub mod checkpoint;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, Standardizer};
use crate::error::Error;
use crate::linalg::Matrix;
use crate::metrics::{EvalReport, OodReport};
use crate::model::{build_variant, HetSngpModel, ModelDims, TrainReport};
use checkpoint::Checkpoint;
use config::{DatasetSpec, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_INPUT: i32 = 5;
pub const EXIT_GRID_DIM: i32 = 6;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "hetsngp", version, about = "Train and evaluate distance-aware heteroscedastic classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output_dir` or the
    /// checkpoint's directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Monte-Carlo samples at prediction time.
    #[arg(long, global = true)]
    pub mc_samples: Option<usize>,
    /// Softmax temperature.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Predict with the posterior mean of the GP weights instead of draws.
    #[arg(long, global = true)]
    pub map_mode: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelKind {
    Observed,
    Clean,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model from --config.
    Train,
    /// Accuracy, NLL and ECE of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset spec (JSON); defaults to the checkpoint's own dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Which part of the train/test split to score.
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        #[arg(long, value_enum, default_value = "observed")]
        labels: LabelKind,
    },
    /// AUROC and FPR@95 of the uncertainty score, ID vs OOD.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        /// In-distribution dataset spec; defaults to the checkpoint's test split.
        #[arg(long)]
        id: Option<PathBuf>,
        /// OOD dataset spec; defaults to the flagged OOD rows of the
        /// checkpoint's dataset.
        #[arg(long)]
        ood: Option<PathBuf>,
    },
    /// Max probability and predicted label over a 2-D grid (CSV).
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        xmin: f64,
        #[arg(long, allow_hyphen_values = true)]
        xmax: f64,
        #[arg(long, allow_hyphen_values = true)]
        ymin: f64,
        #[arg(long, allow_hyphen_values = true)]
        ymax: f64,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
    },
    /// Label-noise benchmark and OOD panels on the synthetic datasets.
    BenchSynthetic {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Train M members with consecutive seeds and score their average.
    Ensemble {
        #[arg(long)]
        members: usize,
    },
}

/// A failed command: exit code plus the error to report.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

type CmdResult<T> = std::result::Result<T, Failure>;

trait Code<T> {
    fn code(self, code: i32) -> CmdResult<T>;
}

impl<T> Code<T> for crate::error::Result<T> {
    fn code(self, code: i32) -> CmdResult<T> {
        self.map_err(|error| Failure { code, error })
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

pub fn execute(cli: &Cli) -> CmdResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train => cmd_train(g).map(|_| ()),
        Command::Eval {
            checkpoint,
            dataset,
            part,
            labels,
        } => cmd_eval(g, checkpoint, dataset.as_deref(), *part, *labels).map(|_| ()),
        Command::Ood { checkpoint, id, ood } => {
            cmd_ood(g, checkpoint, id.as_deref(), ood.as_deref()).map(|_| ())
        }
        Command::Grid {
            checkpoint,
            xmin,
            xmax,
            ymin,
            ymax,
            resolution,
        } => cmd_grid(g, checkpoint, [*xmin, *xmax, *ymin, *ymax], *resolution),
        Command::BenchSynthetic { seeds } => cmd_bench_synthetic(g, *seeds),
        Command::Ensemble { members } => cmd_ensemble(g, *members).map(|_| ()),
    }
}

fn load_run_config(g: &GlobalArgs) -> CmdResult<RunConfig> {
    let path = g.config.as_ref().ok_or_else(|| Failure {
        code: EXIT_CONFIG,
        error: Error::InvalidConfig("--config is required".into()),
    })?;
    let mut cfg = RunConfig::from_file(path).code(EXIT_CONFIG)?;
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(s) = g.mc_samples {
        cfg.predict.mc_samples = s;
    }
    if let Some(t) = g.temperature {
        cfg.train.temperature = t;
        cfg.predict.temperature = t;
    }
    if g.map_mode {
        cfg.predict.map_mode = true;
    }
    cfg.validate().code(EXIT_CONFIG)?;
    Ok(cfg)
}

/// Applies prediction-time flag overrides to a loaded model.
fn apply_predict_overrides(g: &GlobalArgs, model: &mut HetSngpModel) -> CmdResult<()> {
    if let Some(s) = g.mc_samples {
        if s == 0 {
            return Err(Failure {
                code: EXIT_CONFIG,
                error: Error::InvalidConfig("--mc-samples must be >= 1".into()),
            });
        }
        model.predict.mc_samples = s;
    }
    if let Some(t) = g.temperature {
        if !(t > 0.0) {
            return Err(Failure {
                code: EXIT_CONFIG,
                error: Error::InvalidConfig("--temperature must be positive".into()),
            });
        }
        model.predict.temperature = t;
    }
    if g.map_mode {
        model.predict.map_mode = true;
    }
    Ok(())
}

/// Train/test split of a run's dataset, standardized when configured.
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub standardizer: Standardizer,
}

pub fn prepare_data(cfg: &RunConfig, data: &Dataset) -> crate::error::Result<PreparedData> {
    let (train, test) = data::split(data, (1.0 - cfg.test_fraction, cfg.test_fraction), cfg.seed)?;
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    if cfg.standardize {
        let (train, test, standardizer) = data::standardize_fit_transform(&train, &test)?;
        Ok(PreparedData {
            train,
            test,
            standardizer,
        })
    } else {
        Ok(PreparedData {
            standardizer: Standardizer::identity(train.dim()),
            train,
            test,
        })
    }
}

/// Trains one model and returns it as a checkpoint with its report.
pub fn train_checkpoint(cfg: &RunConfig) -> crate::error::Result<(Checkpoint, TrainReport, PreparedData)> {
    let data = cfg.dataset.load()?;
    let prepared = prepare_data(cfg, &data)?;
    let dims = ModelDims {
        input_dim: data.dim(),
        num_classes: data.num_classes,
    };
    let mut mcfg = cfg.model_config();
    mcfg.het.num_classes = data.num_classes;
    let mut model = build_variant(cfg.variant, dims, &mcfg)?;
    let report = model.fit(&prepared.train)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        model,
        standardizer: prepared.standardizer.clone(),
        label_names: data.label_names.clone(),
        feature_names: data.feature_names.clone(),
    };
    Ok((ck, report, prepared))
}

fn training_failure(e: Error) -> Failure {
    let code = match e {
        Error::NonFiniteLoss { .. } => EXIT_DIVERGED,
        Error::InvalidConfig(_) | Error::EmptySchedule => EXIT_CONFIG,
        Error::Io(_)
        | Error::Csv(_)
        | Error::Parse { .. }
        | Error::MissingColumn(_)
        | Error::NonNumericFeature { .. }
        | Error::EmptyInput => EXIT_INPUT,
        _ => EXIT_FAILURE,
    };
    Failure { code, error: e }
}

/// `blob <len>\0<bytes>` hashed with SHA-256, in the style of git object ids.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(Error::from)
        .code(EXIT_FAILURE)?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::from).code(EXIT_FAILURE)
}

fn ensure_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir).map_err(Error::from).code(EXIT_FAILURE)
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    command: &'a str,
    config: &'a RunConfig,
    checkpoint: &'a str,
    content_hash: String,
    n_train: usize,
    n_test: usize,
    final_train_accuracy: f64,
    final_loss: f64,
    lengthscale: Option<f64>,
}

fn write_train_log(path: &Path, report: &TrainReport) -> CmdResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from).code(EXIT_FAILURE)?;
    let res: crate::error::Result<()> = (|| {
        w.write_record(["epoch", "loss", "train_acc"])?;
        for e in &report.epochs {
            w.write_record([e.epoch.to_string(), format!("{:?}", e.loss), format!("{:?}", e.train_acc)])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.code(EXIT_FAILURE)
}

/// Writes checkpoint, epoch log and manifest for one trained model into `dir`.
fn write_training_outputs(
    dir: &Path,
    ck: &Checkpoint,
    report: &TrainReport,
    prepared: &PreparedData,
) -> CmdResult<()> {
    ensure_dir(dir)?;
    let bytes = ck.save(dir.join(CHECKPOINT_FILE)).code(EXIT_FAILURE)?;
    write_train_log(&dir.join(TRAIN_LOG_FILE), report)?;
    let manifest = Manifest {
        format_version: checkpoint::FORMAT_VERSION,
        command: "train",
        config: &ck.config,
        checkpoint: CHECKPOINT_FILE,
        content_hash: content_hash(&bytes),
        n_train: prepared.train.len(),
        n_test: prepared.test.len(),
        final_train_accuracy: report.final_train_accuracy,
        final_loss: report.epochs.last().map_or(f64::NAN, |e| e.loss),
        lengthscale: report.lengthscale,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn cmd_train(g: &GlobalArgs) -> CmdResult<TrainReport> {
    let cfg = load_run_config(g)?;
    let out = g.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let (ck, report, prepared) = train_checkpoint(&cfg).map_err(training_failure)?;
    write_training_outputs(&out, &ck, &report, &prepared)?;
    println!(
        "trained {} on {} points: train accuracy {:.4}, wrote {}",
        cfg.variant,
        prepared.train.len(),
        report.final_train_accuracy,
        out.display()
    );
    Ok(report)
}

fn load_checkpoint(g: &GlobalArgs, path: &Path) -> CmdResult<Checkpoint> {
    let mut ck = Checkpoint::load(path).code(EXIT_CHECKPOINT)?;
    apply_predict_overrides(g, &mut ck.model)?;
    Ok(ck)
}

fn output_dir_for(g: &GlobalArgs, checkpoint: &Path) -> PathBuf {
    g.out.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

/// Scores `x` (raw features) with a checkpoint's standardizer and model.
pub fn checkpoint_proba(ck: &Checkpoint, x: &Matrix) -> crate::error::Result<Matrix> {
    let xs = ck.standardizer.transform(x)?;
    let mut rng = ck.model.prediction_rng();
    ck.model.predict_proba(&xs, ck.model.predict.mc_samples, &mut rng)
}

/// Rows of the checkpoint's (or an explicit) dataset that a command scores,
/// before standardization.
fn select_part(ck: &Checkpoint, spec: Option<&DatasetSpec>, part: Part) -> crate::error::Result<Dataset> {
    let spec = spec.unwrap_or(&ck.config.dataset);
    let data = spec.load()?;
    let cfg = &ck.config;
    let (train, test) = data::split(&data, (1.0 - cfg.test_fraction, cfg.test_fraction), cfg.seed)?;
    Ok(match part {
        Part::Train => train,
        Part::Test => test,
        Part::All => data,
    })
}

pub fn cmd_eval(
    g: &GlobalArgs,
    checkpoint: &Path,
    dataset: Option<&Path>,
    part: Part,
    labels: LabelKind,
) -> CmdResult<EvalReport> {
    let ck = load_checkpoint(g, checkpoint)?;
    let spec = dataset
        .map(DatasetSpec::from_file)
        .transpose()
        .code(EXIT_INPUT)?;
    let data = select_part(&ck, spec.as_ref(), part).code(EXIT_INPUT)?;
    let data = data.in_distribution();
    if data.is_empty() {
        return Err(Failure {
            code: EXIT_INPUT,
            error: Error::EmptyInput,
        });
    }
    if data.num_classes != ck.model.num_classes {
        return Err(Failure {
            code: EXIT_INPUT,
            error: Error::InvalidConfig(format!(
                "dataset has {} classes, checkpoint {}",
                data.num_classes, ck.model.num_classes
            )),
        });
    }
    let probs = checkpoint_proba(&ck, &data.x).code(EXIT_INPUT)?;
    let y = match labels {
        LabelKind::Observed => &data.y[..],
        LabelKind::Clean => data.clean_labels(),
    };
    let report = EvalReport::compute(&probs, y).code(EXIT_FAILURE)?;
    let out = output_dir_for(g, checkpoint);
    ensure_dir(&out)?;
    write_json(&out.join("eval.json"), &report)?;
    println!(
        "accuracy {:.4}  nll {:.4}  ece {:.4}  (n = {})",
        report.accuracy, report.nll, report.ece, report.n
    );
    Ok(report)
}

pub fn cmd_ood(g: &GlobalArgs, checkpoint: &Path, id: Option<&Path>, ood: Option<&Path>) -> CmdResult<OodReport> {
    let ck = load_checkpoint(g, checkpoint)?;
    let load = |p: &Path| -> crate::error::Result<Dataset> { DatasetSpec::from_file(p)?.load() };
    let id_x = match id {
        Some(p) => load(p).code(EXIT_INPUT)?.in_distribution().x,
        None => select_part(&ck, None, Part::Test)
            .code(EXIT_INPUT)?
            .in_distribution()
            .x,
    };
    let ood_x = match ood {
        Some(p) => load(p).code(EXIT_INPUT)?.x,
        None => select_part(&ck, None, Part::All)
            .code(EXIT_INPUT)?
            .out_of_distribution()
            .x,
    };
    if id_x.rows() == 0 || ood_x.rows() == 0 {
        return Err(Failure {
            code: EXIT_INPUT,
            error: Error::InvalidConfig("ID and OOD sets must both be non-empty".into()),
        });
    }
    let unc = |x: &Matrix| -> crate::error::Result<Vec<f64>> {
        let p = checkpoint_proba(&ck, x)?;
        Ok(crate::model::uncertainty_from_probs(&p))
    };
    let report = OodReport::from_uncertainty(&unc(&id_x).code(EXIT_INPUT)?, &unc(&ood_x).code(EXIT_INPUT)?)
        .code(EXIT_INPUT)?;
    let out = output_dir_for(g, checkpoint);
    ensure_dir(&out)?;
    write_json(&out.join("ood.json"), &report)?;
    println!(
        "auroc {:.4}  fpr@95 {:.4}  (n_id = {}, n_ood = {})",
        report.auroc, report.fpr_at_95, report.n_id, report.n_ood
    );
    Ok(report)
}

/// Row-major grid with `y` in the outer loop; `resolution` points per axis
/// including both ends.
pub fn grid_points(bounds: [f64; 4], resolution: usize) -> Matrix {
    let [xmin, xmax, ymin, ymax] = bounds;
    let at = |lo: f64, hi: f64, i: usize| {
        if resolution == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    };
    Matrix::from_fn(resolution * resolution, 2, |r, c| {
        let (iy, ix) = (r / resolution, r % resolution);
        if c == 0 {
            at(xmin, xmax, ix)
        } else {
            at(ymin, ymax, iy)
        }
    })
}

pub fn cmd_grid(g: &GlobalArgs, checkpoint: &Path, bounds: [f64; 4], resolution: usize) -> CmdResult<()> {
    let ck = load_checkpoint(g, checkpoint)?;
    if ck.model.input_dim() != 2 {
        return Err(Failure {
            code: EXIT_GRID_DIM,
            error: Error::InvalidConfig(format!(
                "grid export needs a 2-D model, checkpoint has input_dim {}",
                ck.model.input_dim()
            )),
        });
    }
    if resolution == 0 || bounds.iter().any(|b| !b.is_finite()) {
        return Err(Failure {
            code: EXIT_CONFIG,
            error: Error::InvalidConfig("resolution must be >= 1 and bounds finite".into()),
        });
    }
    let pts = grid_points(bounds, resolution);
    let probs = checkpoint_proba(&ck, &pts).code(EXIT_FAILURE)?;
    let out = output_dir_for(g, checkpoint);
    ensure_dir(&out)?;
    let res: crate::error::Result<()> = (|| {
        let mut w = csv::Writer::from_path(out.join("grid.csv"))?;
        w.write_record(["x", "y", "max_prob", "pred_label"])?;
        for r in 0..pts.rows() {
            let row = probs.row(r);
            let label = crate::model::argmax(row);
            w.write_record([
                format!("{:?}", pts[(r, 0)]),
                format!("{:?}", pts[(r, 1)]),
                format!("{:?}", row[label]),
                label.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })();
    res.code(EXIT_FAILURE)?;
    println!("wrote {} grid points to {}", pts.rows(), out.join("grid.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    seeds: usize,
    label_noise: &'a [bench::VariantSummary],
    ood_mean: &'a [bench::OodPanel],
    ood_panels: &'a [bench::OodPanel],
}

fn write_bench_csv(path: &Path, summaries: &[bench::VariantSummary]) -> crate::error::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "mean_clean_accuracy", "stderr", "seeds"])?;
    for s in summaries {
        w.write_record([
            s.variant.name().to_string(),
            format!("{:?}", s.mean),
            format!("{:?}", s.stderr),
            s.accuracies.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_bench_synthetic(g: &GlobalArgs, seeds: usize) -> CmdResult<()> {
    if seeds == 0 {
        return Err(Failure {
            code: EXIT_CONFIG,
            error: Error::InvalidConfig("--seeds must be >= 1".into()),
        });
    }
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs/bench"));
    let variants = crate::model::VariantKind::ALL;
    let summaries = bench::run_label_noise(&bench::LabelNoiseBench::default(), &variants, seeds)
        .map_err(training_failure)?;
    let panels = bench::run_ood_panels(&bench::OodBench::default(), &variants, g.seed.unwrap_or(0))
        .map_err(training_failure)?;
    let means = bench::mean_panels(&panels);
    ensure_dir(&out)?;
    write_json(
        &out.join("bench.json"),
        &BenchOutput {
            seeds,
            label_noise: &summaries,
            ood_mean: &means,
            ood_panels: &panels,
        },
    )?;
    write_bench_csv(&out.join("bench.csv"), &summaries).code(EXIT_FAILURE)?;

    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "noisy circles, clean-label test accuracy over {seeds} seed(s)");
    let _ = writeln!(stdout, "{:<16} {:>8} {:>8}", "variant", "mean", "stderr");
    for s in &summaries {
        let _ = writeln!(stdout, "{:<16} {:>8.4} {:>8.4}", s.variant.name(), s.mean, s.stderr);
    }
    let _ = writeln!(stdout);
    let _ = writeln!(
        stdout,
        "{:<18} {:<16} {:>8} {:>8} {:>8} {:>10}",
        "dataset", "variant", "id_acc", "auroc", "fpr95", "ood_maxp"
    );
    for p in &means {
        let _ = writeln!(
            stdout,
            "{:<18} {:<16} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
            p.dataset,
            p.variant.name(),
            p.id_accuracy,
            p.report.auroc,
            p.report.fpr_at_95,
            p.report.mean_ood_confidence
        );
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleEval {
    pub ensemble: EvalReport,
    pub members: Vec<EvalReport>,
    pub mean_member_nll: f64,
}

#[derive(Serialize)]
struct EnsembleManifest {
    format_version: u32,
    members: Vec<String>,
    seeds: Vec<u64>,
    content_hashes: Vec<String>,
}

/// Worker threads for ensemble training: `HETSNGP_THREADS` if set, else the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("HETSNGP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains `configs` on up to `threads` worker threads, keeping input order.
pub fn train_many(
    configs: &[RunConfig],
    threads: usize,
) -> Vec<crate::error::Result<(Checkpoint, TrainReport, PreparedData)>> {
    let threads = threads.clamp(1, configs.len().max(1));
    let mut results: Vec<Option<_>> = (0..configs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    (t..configs.len())
                        .step_by(threads)
                        .map(|i| (i, train_checkpoint(&configs[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("training thread panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every member trained")).collect()
}

/// Scores each member with its own prediction stream and averages the
/// members' probabilities, so member and ensemble metrics share draws.
pub fn evaluate_ensemble(members: &[Checkpoint], test: &Dataset) -> crate::error::Result<EnsembleEval> {
    let first = members.first().ok_or(Error::EmptyInput)?;
    let mut avg = Matrix::zeros(test.len(), first.model.num_classes);
    let mut reports = Vec::with_capacity(members.len());
    for ck in members {
        let p = checkpoint_proba(ck, &test.x)?;
        reports.push(EvalReport::compute(&p, &test.y)?);
        avg.add_assign(&p)?;
    }
    avg.scale(1.0 / members.len() as f64);
    let mean_member_nll = reports.iter().map(|r| r.nll).sum::<f64>() / members.len() as f64;
    Ok(EnsembleEval {
        ensemble: EvalReport::compute(&avg, &test.y)?,
        members: reports,
        mean_member_nll,
    })
}

pub fn cmd_ensemble(g: &GlobalArgs, members: usize) -> CmdResult<EnsembleEval> {
    if members == 0 {
        return Err(Failure {
            code: EXIT_CONFIG,
            error: Error::InvalidConfig("ensemble needs at least one member".into()),
        });
    }
    let base = load_run_config(g)?;
    let out = g.out.clone().unwrap_or_else(|| base.output_dir.clone());
    // Members vary only the training seed; the split stays the base seed's.
    let configs: Vec<RunConfig> = (0..members as u64)
        .map(|i| {
            let mut c = base.clone();
            c.train.seed = base.seed + i;
            c
        })
        .collect();
    let trained = train_many(&configs, worker_threads());
    let mut checkpoints = Vec::with_capacity(members);
    let mut names = Vec::new();
    let mut hashes = Vec::new();
    for (i, r) in trained.into_iter().enumerate() {
        let (ck, report, prepared) = r.map_err(training_failure)?;
        let name = format!("member_{i}");
        let dir = out.join(&name);
        write_training_outputs(&dir, &ck, &report, &prepared)?;
        hashes.push(content_hash(&ck.to_bytes().code(EXIT_FAILURE)?));
        names.push(format!("{name}/{CHECKPOINT_FILE}"));
        checkpoints.push(ck);
    }

    // Members share the base seed's split so they are scored on one test set.
    let data = base.dataset.load().code(EXIT_INPUT)?;
    let (_, test) = data::split(&data, (1.0 - base.test_fraction, base.test_fraction), base.seed)
        .code(EXIT_INPUT)?;
    let test = test.in_distribution();
    if test.is_empty() {
        return Err(Failure {
            code: EXIT_INPUT,
            error: Error::EmptyInput,
        });
    }
    let result = evaluate_ensemble(&checkpoints, &test).code(EXIT_FAILURE)?;
    write_json(
        &out.join("ensemble_manifest.json"),
        &EnsembleManifest {
            format_version: checkpoint::FORMAT_VERSION,
            members: names,
            seeds: configs.iter().map(|c| c.train.seed).collect(),
            content_hashes: hashes,
        },
    )?;
    write_json(&out.join("ensemble_eval.json"), &result)?;
    println!(
        "ensemble of {members}: nll {:.4} (mean member {:.4}), accuracy {:.4}",
        result.ensemble.nll, result.mean_member_nll, result.ensemble.accuracy
    );
    Ok(result)
}
