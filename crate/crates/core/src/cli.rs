//! The `cdrl` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::Serialize;
use thiserror::Error;

use crate::eval::{auroc, density_grid, ood_score, EvalError};
use crate::io::{self, IoError};
use crate::models::{GuidanceSpec, ModelError, ModelPair};
use crate::rng::RngStream;
use crate::sampler::{generate, inpaint, SampleBatch, SamplerConfig, SamplerError};
use crate::schedule::{NoiseSchedule, ScheduleConfig, SigmaTildeRule};
use crate::trainer::{Checkpoint, CheckpointError, ConfigError, TrainConfig, TrainError, Trainer};

pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const UNKNOWN_FLAG: i32 = 2;
    pub const MISSING_ARGUMENT: i32 = 3;
    pub const INVALID_VALUE: i32 = 4;
    pub const CONFIG: i32 = 5;
    pub const IO: i32 = 6;
    pub const DIVERGED: i32 = 7;
    pub const DIMENSION: i32 = 8;
}

#[derive(Parser, Debug)]
#[command(name = "cdrl", version, about = "Train and sample cooperative diffusion recovery likelihood models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the noise schedule table as CSV.
    Schedule(ScheduleArgs),
    /// Train an energy model and initializer.
    Train(TrainArgs),
    /// Generate samples from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate a 2-D model's log-density on a grid.
    Density(DensityArgs),
    /// Score two pools by lowest-level energy and report AUROC.
    Ood(OodArgs),
    /// Fill masked coordinates of observed points.
    Inpaint(InpaintArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct ScheduleArgs {
    #[arg(long = "T", default_value_t = 6)]
    pub levels: usize,
    #[arg(long, default_value_t = 9.8, allow_negative_numbers = true)]
    pub lambda_max: f64,
    #[arg(long, default_value_t = -5.1, allow_negative_numbers = true)]
    pub lambda_min: f64,
    #[arg(long, default_value_t = 0.054)]
    pub step_constant: f64,
    /// `next_step` or `same_level`.
    #[arg(long, default_value = "next_step")]
    pub sigma_tilde: SigmaTildeRule,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Config override, `key=value`; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 500)]
    pub log_every: u64,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct SamplingArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Langevin steps per level.
    #[arg(long, default_value_t = 15)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub guidance_w: f64,
    /// `-1` for unconditional, a class index, or a comma list to compose.
    #[arg(long = "class", default_value = "-1", allow_hyphen_values = true)]
    pub class: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub tweedie_coeff: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    /// Use the raw weights instead of the EMA shadows.
    #[arg(long)]
    pub raw_weights: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-level CSVs.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DensityArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub level: usize,
    /// `xmin,xmax,ymin,ymax`.
    #[arg(long, default_value = "-2,2,-2,2", allow_hyphen_values = true)]
    pub bounds: String,
    #[arg(long, default_value_t = 100)]
    pub res: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub raw_weights: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct OodArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pos: PathBuf,
    #[arg(long)]
    pub neg: PathBuf,
    /// Per-sample scores CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub raw_weights: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct InpaintArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Same shape as the input; 1 marks a coordinate to fill.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse one noise draw for the observed region at every level.
    #[arg(long)]
    pub shared_noise: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String, i32),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error("I/O: {0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
    #[error("dimension: {0}")]
    Dimension(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_, c) => *c,
            CliError::Invalid(_) => exit::INVALID_VALUE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Io(_) => exit::IO,
            CliError::Diverged(_) => exit::DIVERGED,
            CliError::Dimension(_) => exit::DIMENSION,
            CliError::Other(_) => exit::OTHER,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Dimension { .. } => CliError::Dimension(e.to_string()),
            ModelError::BadClass { .. } | ModelError::NotConditional | ModelError::NoConcepts => {
                CliError::Invalid(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Model(m) => m.into(),
            SamplerError::Diverged { .. } => CliError::Diverged(e.to_string()),
            SamplerError::MaskShape { .. } => CliError::Dimension(e.to_string()),
            SamplerError::Schedule(_) => CliError::Invalid(e.to_string()),
            SamplerError::WrongLevel { .. } => CliError::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::NotTwoDimensional(_) | EvalError::ToyDimension { .. } => CliError::Dimension(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Schedule(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::Io(i) => i.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Diverged { .. } | TrainError::NonFinite { .. } => CliError::Diverged(e.to_string()),
            TrainError::Data(_) => CliError::Config(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => exit::OK,
                ErrorKind::UnknownArgument | ErrorKind::InvalidSubcommand => exit::UNKNOWN_FLAG,
                ErrorKind::MissingRequiredArgument
                | ErrorKind::MissingSubcommand
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => exit::MISSING_ARGUMENT,
                ErrorKind::InvalidValue | ErrorKind::ValueValidation | ErrorKind::InvalidUtf8 => exit::INVALID_VALUE,
                _ => exit::UNKNOWN_FLAG,
            };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, &args) {
        Ok(()) => exit::OK,
        Err(e) => {
            error!("{e}");
            eprintln!("cdrl: {e}");
            e.exit_code()
        }
    }
}

/// Installs the `CDRL_LOG`-driven logger (default `warn`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("CDRL_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a [String],
    seed: Option<u64>,
    resolved: C,
}

/// `<out>.manifest.json` next to an artifact.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_manifest<C: Serialize>(out: &Path, argv: &[String], seed: Option<u64>, resolved: C) -> Result<()> {
    let m = Manifest {
        tool: "cdrl",
        version: env!("CARGO_PKG_VERSION"),
        command: argv,
        seed,
        resolved,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Other(e.to_string()))?;
    io::write(&manifest_path(out), text + "\n")?;
    Ok(())
}

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Schedule(a) => run_schedule(a, argv),
        Command::Train(a) => run_train(a, argv),
        Command::Sample(a) => run_sample(a, argv),
        Command::Density(a) => run_density(a, argv),
        Command::Ood(a) => run_ood(a, argv),
        Command::Inpaint(a) => run_inpaint(a, argv),
    }
}

fn run_schedule(a: ScheduleArgs, argv: &[String]) -> Result<()> {
    let cfg = ScheduleConfig {
        num_levels: a.levels,
        lambda_max: a.lambda_max,
        lambda_min: a.lambda_min,
        step_constant: a.step_constant,
        sigma_tilde: a.sigma_tilde,
    };
    let sched = NoiseSchedule::new(cfg.clone()).map_err(|e| CliError::Invalid(e.to_string()))?;
    match &a.out {
        Some(out) => {
            io::write(out, sched.to_csv())?;
            write_manifest(out, argv, None, &cfg)?;
        }
        None => print!("{}", sched.to_csv()),
    }
    Ok(())
}

fn run_train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(&io::read_to_string(&a.config)?)?;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut tr = Trainer::load(path)?;
            let mut stored = tr.config.clone();
            stored.total_iters = cfg.total_iters;
            if stored != cfg {
                return Err(CliError::Config(
                    "resume config differs from the checkpoint in keys other than total_iters".into(),
                ));
            }
            tr.config.total_iters = cfg.total_iters;
            info!("resuming at iteration {}", tr.iter);
            tr
        }
        None => Trainer::new(cfg.clone())?,
    };
    let every = a.log_every.max(1);
    let result = trainer.fit(|s| {
        if (s.iter + 1) % every == 0 {
            info!(
                "iter {} level {} ebm_loss {:.4e} init_loss {:.4e} f_real {:.4e} f_fake {:.4e}",
                s.iter + 1,
                s.level,
                s.ebm_loss,
                s.init_loss,
                s.mean_energy_real,
                s.mean_energy_fake
            );
        }
    });
    if let Err(e) = result {
        let mut dump = a.out.as_os_str().to_owned();
        dump.push(".failed");
        let dump = PathBuf::from(dump);
        if trainer.save(&dump).is_ok() {
            error!("training state at failure written to {}", dump.display());
        }
        return Err(e.into());
    }
    trainer.save(&a.out)?;
    write_manifest(&a.out, argv, Some(cfg.seed), &cfg)?;
    Ok(())
}

fn parse_guidance(class: &str, w: f64) -> Result<GuidanceSpec> {
    if !(w >= 0.0) {
        return Err(CliError::Invalid(format!("guidance weight must be non-negative, got {w}")));
    }
    let class = class.trim();
    if class == "-1" || class.is_empty() {
        return Ok(GuidanceSpec {
            weight: w,
            concepts: vec![],
        });
    }
    let concepts = class
        .split(',')
        .map(|c| {
            c.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Invalid(format!("bad class `{c}`")))
        })
        .collect::<Result<_>>()?;
    Ok(GuidanceSpec { weight: w, concepts })
}

fn sampler_config(a: &SamplingArgs, ckpt: &Checkpoint) -> Result<SamplerConfig> {
    if !(a.tweedie_coeff >= 0.0) {
        return Err(CliError::Invalid("tweedie coefficient must be non-negative".into()));
    }
    Ok(SamplerConfig {
        steps: a.steps,
        train_steps: ckpt.header.config.steps.max(1),
        guidance: parse_guidance(&a.class, a.guidance_w)?,
        tweedie_coeff: a.tweedie_coeff,
        noise_scale: a.noise_scale,
        ..SamplerConfig::default()
    })
}

#[derive(Serialize)]
struct SampleManifest<'a, A: Serialize> {
    args: &'a A,
    sampler: &'a SamplerConfig,
}

fn run_sample(a: SampleArgs, argv: &[String]) -> Result<()> {
    let ckpt = Checkpoint::read(&a.sampling.ckpt)?;
    let (energy, init) = ckpt.models(!a.sampling.raw_weights)?;
    let mut cfg = sampler_config(&a.sampling, &ckpt)?;
    cfg.trace = a.trace.is_some();
    let mut rng = RngStream::new(a.sampling.seed);
    let out = generate(ModelPair::new(&energy, &init), a.n, &cfg, &mut rng)?;
    io::write(&a.out, io::matrix_csv(&out.samples.data))?;
    if let (Some(dir), Some(trace)) = (&a.trace, &out.trace) {
        for b in &trace.levels {
            io::write(&dir.join(format!("level_{}.csv", b.level)), io::matrix_csv(&b.data))?;
        }
    }
    write_manifest(&a.out, argv, Some(a.sampling.seed), SampleManifest { args: &a, sampler: &cfg })?;
    Ok(())
}

fn parse_bounds(s: &str) -> Result<[f64; 4]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Invalid(format!("bad bounds `{s}`")))?;
    v.try_into()
        .map_err(|_| CliError::Invalid(format!("bounds need 4 values, got `{s}`")))
}

fn run_density(a: DensityArgs, argv: &[String]) -> Result<()> {
    let bounds = parse_bounds(&a.bounds)?;
    let ckpt = Checkpoint::read(&a.ckpt)?;
    let (energy, _) = ckpt.models(!a.raw_weights)?;
    let levels = ckpt.header.schedule.num_levels;
    if a.level >= levels {
        return Err(CliError::Invalid(format!("level {} out of range 0..{levels}", a.level)));
    }
    let grid = density_grid(&energy, a.level, bounds, a.res)?;
    io::write(&a.out, grid.to_csv())?;
    write_manifest(&a.out, argv, None, &a)?;
    Ok(())
}

fn read_points(path: &Path, dim: usize) -> Result<SampleBatch> {
    let (_, x) = io::read_csv(path)?;
    if x.cols() != dim {
        return Err(CliError::Dimension(format!(
            "{} has {} columns, the model expects {dim}",
            path.display(),
            x.cols()
        )));
    }
    Ok(SampleBatch::new(0, x))
}

fn run_ood(a: OodArgs, argv: &[String]) -> Result<()> {
    let ckpt = Checkpoint::read(&a.ckpt)?;
    let (energy, _) = ckpt.models(!a.raw_weights)?;
    let dim = ckpt.header.energy_spec.input_dim;
    let pos = ood_score(&energy, &read_points(&a.pos, dim)?)?;
    let neg = ood_score(&energy, &read_points(&a.neg, dim)?)?;
    let score = auroc(&pos, &neg)?;
    println!("{score}");
    if let Some(out) = &a.out {
        let mut csv = String::from("pool,index,score\n");
        for (pool, s) in [("pos", &pos), ("neg", &neg)] {
            for (i, v) in s.iter().enumerate() {
                csv.push_str(&format!("{pool},{i},{v:e}\n"));
            }
        }
        io::write(out, csv)?;
        #[derive(Serialize)]
        struct R<'a> {
            args: &'a OodArgs,
            auroc: f64,
        }
        write_manifest(out, argv, None, R { args: &a, auroc: score })?;
    }
    Ok(())
}

fn run_inpaint(a: InpaintArgs, argv: &[String]) -> Result<()> {
    let ckpt = Checkpoint::read(&a.sampling.ckpt)?;
    let (energy, init) = ckpt.models(!a.sampling.raw_weights)?;
    let dim = ckpt.header.energy_spec.input_dim;
    let observed = read_points(&a.input, dim)?;
    let (_, m) = io::read_csv(&a.mask)?;
    if m.shape() != observed.data.shape() {
        return Err(CliError::Dimension(format!(
            "mask shape {:?} does not match input shape {:?}",
            m.shape(),
            observed.data.shape()
        )));
    }
    let mask: Vec<bool> = m.data().iter().map(|&v| v != 0.0).collect();
    let mut cfg = sampler_config(&a.sampling, &ckpt)?;
    cfg.shared_inpaint_noise = a.shared_noise;
    let mut rng = RngStream::new(a.sampling.seed);
    let out = inpaint(ModelPair::new(&energy, &init), &observed, &mask, &cfg, &mut rng)?;
    io::write(&a.out, io::matrix_csv(&out.data))?;
    write_manifest(&a.out, argv, Some(a.sampling.seed), SampleManifest { args: &a, sampler: &cfg })?;
    Ok(())
}
