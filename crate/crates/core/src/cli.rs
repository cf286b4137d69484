//! The `varsig` command line: `synth`, `train`, `retrieve`, `baseline` and
//! `eval`.
//!
//! Settings come from CLI flags, then the `--config` JSON file, then
//! built-in defaults. Every output directory gets a `run_config.json` with
//! the effective configuration and its hash. Failures print one line to
//! stderr, `error kind=<kind> code=<n> message="<json string>"`, and exit
//! with the code from [`exit_code`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::artifact::{load_config, load_model, load_trainer, save_trainer};
use crate::baselines::{tv_map_solve, TvConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Estimator, MethodSpec};
use crate::fsutil::{config_hash, create_dir, read_json, write_bytes, write_json};
use crate::imageio::{save_gray, save_line_plot, save_rgb};
use crate::metrics::{fidelity, PsnrFormula};
use crate::model::{Method, Model, ModelConfig, Stats};
use crate::physics::{FresnelConfig, FresnelModel, PhysicsConfig, StreakingConfig, VideoCsConfig};
use crate::synth::{
    synth_hologram_dataset, synth_pulse_dataset, synth_video_dataset, MnistSplit, SynthOptions, VideoSource,
};
use crate::tensor_file;
use crate::train::Trainer;
use crate::types::SystemId;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "VARSIG_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the MNIST IDX files.
    pub data_root: PathBuf,
    /// Images for video synthesis; procedural scenes when absent.
    pub video_images: Option<PathBuf>,
    pub artifact_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_root: PathBuf::from("data/mnist"),
            video_images: None,
            artifact_dir: None,
            report_dir: None,
        }
    }
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: Option<SystemId>,
    /// Base seed for synthesis, training and retrieval.
    pub seed: u64,
    pub paths: Paths,
    /// Network settings; `train` replaces `model.seed` with `seed`.
    pub model: ModelConfig,
    pub streaking: StreakingConfig,
    pub video_cs: VideoCsConfig,
    pub hologram: FresnelConfig,
    pub tv: TvConfig,
    pub synth: SynthOptions,
    pub mnist_split: MnistSplit,
    pub psnr_formula: PsnrFormula,
}

impl RunConfig {
    pub fn physics(&self, system: SystemId) -> PhysicsConfig {
        match system {
            SystemId::Streaking => PhysicsConfig::Streaking(self.streaking.clone()),
            SystemId::VideoCs => PhysicsConfig::VideoCs(self.video_cs.clone()),
            SystemId::Hologram => PhysicsConfig::Hologram(self.hologram.clone()),
        }
    }

    fn set_physics(&mut self, p: &PhysicsConfig) {
        match p {
            PhysicsConfig::Streaking(c) => self.streaking = c.clone(),
            PhysicsConfig::VideoCs(c) => self.video_cs = c.clone(),
            PhysicsConfig::Hologram(c) => self.hologram = c.clone(),
        }
    }
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    config_hash: String,
    config: &'a RunConfig,
}

fn echo(out: &Path, command: &str, cfg: &RunConfig) -> Result<String> {
    let hash = config_hash(&(command, cfg))?;
    write_json(
        &out.join("run_config.json"),
        &Echo {
            command,
            config_hash: hash.clone(),
            config: cfg,
        },
    )?;
    Ok(hash)
}

#[derive(Debug, Parser)]
#[command(
    name = "varsig",
    version,
    about = "Signal retrieval with a physics-in-the-loop conditional variational model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dataset of (signal, measurement) records.
    Synth(SynthArgs),
    /// Train a variational, deterministic or physics-informed model.
    Train(TrainArgs),
    /// Draw reconstructions for one measurement from a trained model.
    Retrieve(RetrieveArgs),
    /// TV-regularized iterative reconstruction (video CS).
    Baseline(BaselineArgs),
    /// Score methods on a test set (PSNR and fidelity).
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values [default: built-in settings]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed [default: `seed` from the config, else 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write PNG figures
    #[arg(long, global = true)]
    pub plots: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// streaking, video_cs or hologram [default: `system` from the config]
    #[arg(long)]
    pub system: Option<SystemId>,
    /// Number of records
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// MNIST split for holograms, train or test [default: `mnist_split` from the config, else train]
    #[arg(long)]
    pub split: Option<String>,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Must match the dataset's system when given [default: the dataset's system]
    #[arg(long)]
    pub system: Option<SystemId>,
    /// variational, deterministic or physics_informed
    #[arg(long)]
    pub method: Method,
    /// Training dataset directory
    #[arg(long)]
    pub dataset: PathBuf,
    /// Epoch count [default: `model.epochs` from the config, else 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the checkpoint in --out if there is one
    #[arg(long)]
    pub resume: bool,
    /// Output artifact directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained model artifact directory
    #[arg(long)]
    pub artifact: PathBuf,
    /// Measurement tensor file
    #[arg(long)]
    pub measurement: PathBuf,
    /// Number of reconstructions to draw
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: Common,
    /// System of the measurement [default: `system` from the config, else video_cs]
    #[arg(long)]
    pub system: Option<SystemId>,
    /// Measurement tensor file
    #[arg(long)]
    pub measurement: PathBuf,
    /// TV strength [default: `tv.lambda_tv` from the config, else 100]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated methods: artifact directories (optionally `label=dir`) or `tv`
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub methods: Vec<String>,
    /// Test dataset directory
    #[arg(long)]
    pub testset: PathBuf,
    /// Reconstructions per record
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    /// linear or standard [default: `psnr_formula` from the config, else linear]
    #[arg(long)]
    pub formula: Option<PsnrFormula>,
    /// Output report directory
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error kind. Usage errors exit with 2.
pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        "config" => 3,
        "missing_file" => 4,
        "system_mismatch" => 5,
        "format" | "json" => 6,
        "shape" => 7,
        "domain" | "alignment_undefined" => 8,
        "unsupported" => 9,
        "state" => 10,
        "non_finite_loss" => 11,
        _ => 12,
    }
}

pub const USAGE_EXIT: i32 = 2;

pub fn error_line(kind: &str, code: i32, message: &str) -> String {
    let msg = serde_json::to_string(message).unwrap_or_else(|_| "\"\"".into());
    format!("error kind={kind} code={code} message={msg}")
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", USAGE_EXIT, first));
            return USAGE_EXIT;
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_line(e.kind(), code, &e.to_string()));
            code
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // A second initialization (e.g. in tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
            read_json::<RunConfig>(p).map_err(|e| match e {
                Error::Json(j) => Error::Config(format!("{}: {j}", p.display())),
                other => other,
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn require_system(flag: Option<SystemId>, cfg: &RunConfig) -> Result<SystemId> {
    flag.or(cfg.system)
        .ok_or_else(|| Error::Config("no system given (use --system or `system` in the config)".into()))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = load_run_config(&a.common)?;
    let system = require_system(a.system, &cfg)?;
    cfg.system = Some(system);
    if let Some(s) = &a.split {
        cfg.mnist_split = serde_json::from_value(serde_json::Value::String(s.clone()))
            .map_err(|_| Error::Config(format!("unknown split `{s}`, expected train or test")))?;
    }
    let ds = match system {
        SystemId::Streaking => synth_pulse_dataset(a.n, cfg.seed, &cfg.streaking, &cfg.synth)?,
        SystemId::VideoCs => {
            let src = match &cfg.paths.video_images {
                Some(dir) => VideoSource::ImageDir(dir.clone()),
                None => VideoSource::Synthetic,
            };
            synth_video_dataset(&src, a.n, cfg.seed, &cfg.video_cs, &cfg.synth)?
        }
        SystemId::Hologram => {
            synth_hologram_dataset(&cfg.paths.data_root, cfg.mnist_split, a.n, cfg.seed, &cfg.hologram, &cfg.synth)?
        }
    };
    ds.save(&a.out)?;
    let hash = echo(&a.out, "synth", &cfg)?;
    if a.common.plots {
        let r = &ds.records[0];
        let dir = a.out.join("plots");
        plot_signal(&dir.join("record_000000_f"), r.f.shape(), r.f.as_flat())?;
        plot_measurement(&dir.join("record_000000_g.png"), r.g.shape(), r.g.as_flat())?;
    }
    println!("wrote {} {} records to {} (config {hash})", ds.len(), system, a.out.display());
    Ok(())
}

fn stats_for(ds: &Dataset) -> Result<Stats> {
    let ex = ds.examples();
    let pairs: Vec<(&[f64], &[f64])> = ex.iter().map(|e| (e.f.as_slice(), e.g.as_slice())).collect();
    match &ds.physics {
        PhysicsConfig::Hologram(c) => Stats::compute(&pairs, Some(&FresnelModel::new(c.clone())?)),
        _ => Stats::compute(&pairs, None),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(&a.common)?;
    let ds = Dataset::load(&a.dataset)?;
    if let Some(expected) = a.system.or(cfg.system) {
        if expected != ds.system() {
            return Err(Error::SystemMismatch {
                expected,
                found: ds.system(),
            });
        }
    }
    cfg.system = Some(ds.system());
    cfg.set_physics(&ds.physics);
    cfg.model.seed = cfg.seed;
    if let Some(e) = a.epochs {
        cfg.model.epochs = e;
    }
    cfg.model.validate()?;

    let examples = ds.examples();
    let state = a.out.join("optimizer/train_state.json");
    let mut trainer = if a.resume && state.exists() {
        let tr = load_trainer(&a.out)?;
        let saved = load_config(&a.out)?;
        let mut want = cfg.model.clone();
        want.epochs = saved.model.epochs;
        if saved.method != a.method || saved.model != want || saved.physics != ds.physics {
            return Err(Error::Config(format!(
                "checkpoint in {} was trained with different settings",
                a.out.display()
            )));
        }
        let mut model = tr.model;
        model.set_epochs(cfg.model.epochs)?;
        Trainer {
            model,
            opt: tr.opt,
            curve: tr.curve,
        }
    } else {
        let model = Model::new(cfg.model.clone(), a.method, ds.physics.clone(), stats_for(&ds)?)?;
        Trainer::new(model)
    };
    create_dir(&a.out)?;
    let hash = echo(&a.out, "train", &cfg)?;
    let out = a.out.clone();
    trainer.run(&examples, |tr, row| {
        println!("{}", row.csv_line());
        save_trainer(tr, &out)
    })?;
    save_trainer(&trainer, &a.out)?;
    if a.common.plots {
        let loss: Vec<f64> = trainer.curve.iter().map(|r| r.loss).collect();
        save_line_plot(&a.out.join("plots/loss_curve.png"), &[loss])?;
    }
    println!("trained {} model in {} (config {hash})", a.method, a.out.display());
    Ok(())
}

fn read_measurement(path: &Path, model_len: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let t = tensor_file::read(path)?;
    if t.data.len() != model_len {
        return Err(Error::Shape(format!(
            "measurement has {} values, the model expects {model_len}",
            t.data.len()
        )));
    }
    Ok(t.data)
}

fn tensor_dims(shape: &[usize]) -> Vec<usize> {
    if !shape.is_empty() && shape.len() <= 4 {
        shape.to_vec()
    } else {
        vec![shape.iter().product()]
    }
}

pub fn cmd_retrieve(a: &RetrieveArgs) -> Result<()> {
    let mut cfg = load_run_config(&a.common)?;
    if a.instances == 0 {
        return Err(Error::Config("--instances must be at least 1".into()));
    }
    if !a.artifact.join("config.json").exists() {
        return Err(Error::MissingFile(a.artifact.join("config.json")));
    }
    let model = load_model(&a.artifact)?;
    let fm = model.forward_model().clone();
    let g = read_measurement(&a.measurement, fm.measurement_len())?;
    cfg.system = Some(model.system());
    cfg.set_physics(model.physics());
    cfg.model = model.config().clone();

    let estimates = model.reconstruct(&g, a.instances, cfg.seed)?;
    create_dir(&a.out)?;
    let hash = echo(&a.out, "retrieve", &cfg)?;
    let mut csv = String::from("instance,fidelity_db\n");
    for (k, f) in estimates.iter().enumerate() {
        let path = a.out.join(format!("instance_{k:03}.tns"));
        tensor_file::write_f64(&path, &tensor_dims(f.shape()), f.as_flat())?;
        let fid = fidelity(f.as_flat(), &g, fm.as_ref(), cfg.psnr_formula)?;
        csv.push_str(&format!("{k},{fid}\n"));
        if a.common.plots {
            plot_signal(&a.out.join(format!("plots/instance_{k:03}")), f.shape(), f.as_flat())?;
        }
    }
    write_bytes(&a.out.join("fidelity.csv"), csv.as_bytes())?;
    println!("wrote {} instances to {} (config {hash})", estimates.len(), a.out.display());
    Ok(())
}

pub fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let mut cfg = load_run_config(&a.common)?;
    let system = a.system.or(cfg.system).unwrap_or(SystemId::VideoCs);
    cfg.system = Some(system);
    if let Some(l) = a.lambda {
        cfg.tv.lambda_tv = l;
    }
    let fm = cfg.physics(system).build()?;
    let g = read_measurement(&a.measurement, fm.measurement_len())?;
    let sol = tv_map_solve(&g, fm.as_ref(), &cfg.tv)?;
    create_dir(&a.out)?;
    let hash = echo(&a.out, "baseline", &cfg)?;
    tensor_file::write_f64(
        a.out.join("reconstruction.tns"),
        &tensor_dims(sol.f.shape()),
        sol.f.as_flat(),
    )?;
    write_bytes(&a.out.join("history.csv"), sol.history_csv().as_bytes())?;
    if a.common.plots {
        let obj: Vec<f64> = sol.history.iter().map(|r| r.objective.max(f64::MIN_POSITIVE).log10()).collect();
        save_line_plot(&a.out.join("plots/objective.png"), &[obj])?;
        plot_signal(&a.out.join("plots/reconstruction"), sol.f.shape(), sol.f.as_flat())?;
    }
    println!(
        "TV reconstruction after {} iterations in {} (config {hash})",
        sol.history.len() - 1,
        a.out.display()
    );
    Ok(())
}

enum Loaded {
    Model(String, Model),
    Tv,
}

fn parse_method(entry: &str) -> Result<Loaded> {
    if entry == "tv" {
        return Ok(Loaded::Tv);
    }
    let (label, dir) = match entry.split_once('=') {
        Some((l, d)) => (Some(l.to_string()), PathBuf::from(d)),
        None => (None, PathBuf::from(entry)),
    };
    if !dir.join("config.json").exists() {
        return Err(Error::Config(format!(
            "method `{entry}` is neither `tv` nor a model artifact directory"
        )));
    }
    let model = load_model(&dir)?;
    let label = label.unwrap_or_else(|| model.method().to_string());
    Ok(Loaded::Model(label, model))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = load_run_config(&a.common)?;
    if let Some(f) = a.formula {
        cfg.psnr_formula = f;
    }
    let ds = Dataset::load(&a.testset)?;
    cfg.system = Some(ds.system());
    cfg.set_physics(&ds.physics);
    let loaded = a.methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>>>()?;
    let specs: Vec<MethodSpec<'_>> = loaded
        .iter()
        .map(|l| match l {
            Loaded::Model(label, m) => MethodSpec {
                label,
                estimator: Estimator::Learned(m),
            },
            Loaded::Tv => MethodSpec {
                label: "tv",
                estimator: Estimator::Tv(&cfg.tv),
            },
        })
        .collect();
    let mut report = evaluate(&specs, &ds, a.instances, cfg.seed, cfg.psnr_formula)?;
    create_dir(&a.out)?;
    let hash = echo(&a.out, "eval", &cfg)?;
    report.config_hash = Some(hash);
    report.write(&a.out)?;
    println!("method,rows,mean_psnr_db,mean_fidelity_db");
    for s in &report.summary {
        println!("{},{},{:.4},{:.4}", s.method, s.rows, s.mean_psnr_db, s.mean_fidelity_db);
    }
    Ok(())
}

fn unit_scale(data: &[f64]) -> Vec<f64> {
    let hi = data.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    let s = if hi > 0.0 { 1.0 / hi } else { 1.0 };
    data.iter().map(|v| (v * s).clamp(0.0, 1.0)).collect()
}

/// PNGs of a signal: an image, one RGB image per video frame, or a line plot.
fn plot_signal(prefix: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let name = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    match *shape {
        [h, w] => save_gray(&name(".png"), w, h, data),
        [h, w, c, frames] if c == 3 => {
            for t in 0..frames {
                let frame: Vec<f64> = (0..h * w * c).map(|i| data[i * frames + t]).collect();
                save_rgb(&name(&format!("_frame{t}.png")), w, h, &frame.iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>())?;
            }
            Ok(())
        }
        _ => save_line_plot(&name(".png"), &[data.to_vec()]),
    }
}

fn plot_measurement(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    match *shape {
        [h, w] => save_gray(path, w, h, data),
        [h, w, 3] => save_rgb(path, w, h, &unit_scale(data)),
        _ => save_line_plot(path, &[data.to_vec()]),
    }
}
