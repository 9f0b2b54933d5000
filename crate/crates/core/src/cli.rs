//! Command-line front end: mask, train, impute, eval, ablate, bench.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, FORMAT_NAME};
use crate::data::{
    default_missing_tokens, format_number, infer_schema, read_mask_sidecar, read_truth_sidecar, ColumnKind,
    MissingStatus, RawTable, ReadOptions, Schema, TabularDataset, DEFAULT_MAX_CATEGORIES,
};
use crate::error::{Error, Result};
use crate::eval::{benchmark_grid, score_files, write_grid, GridSpec, MetricsReport};
use crate::predictor::Architecture;
use crate::sampler::{impute_dataset, Aggregation, InitMode, Method, SamplerConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind, ScheduleParams};
use crate::training::{train_from, TrainConfig, TrainingState};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format MDDIM1)");

#[derive(Debug, Parser)]
#[command(
    name = "ddim-impute",
    version = VERSION,
    about = "Diffusion-based imputation for tabular data",
    args_conflicts_with_subcommands = true
)]
pub struct Cli {
    /// Replay a run_config.json written by an earlier invocation.
    #[arg(long, value_name = "RUN_CONFIG")]
    pub config: Option<PathBuf>,
    /// With --config: write artifacts here instead of the recorded directory.
    #[arg(long = "replay-out-dir", requires = "config")]
    pub replay_out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Hide a random fraction of observed cells and record the ground truth.
    Mask(MaskArgs),
    /// Train the noise predictor on a (possibly incomplete) CSV.
    Train(TrainArgs),
    /// Fill every missing cell of a CSV with a trained checkpoint.
    Impute(ImputeArgs),
    /// Score a completed CSV against the truth sidecar.
    Eval(EvalArgs),
    /// Sweep eta and step count (defaults: eta 0,0.5,1 x steps 25,50,75,100).
    Ablate(GridArgs),
    /// Time sampling across step counts (defaults: eta 0 x steps 20,50,100, 3 repeats).
    Bench(GridArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Mask(_) => "mask",
            Command::Train(_) => "train",
            Command::Impute(_) => "impute",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Bench(_) => "bench",
        }
    }

    fn out_dir_mut(&mut self) -> &mut PathBuf {
        match self {
            Command::Mask(a) => &mut a.out_dir,
            Command::Train(a) => &mut a.out_dir,
            Command::Impute(a) => &mut a.out_dir,
            Command::Eval(a) => &mut a.out_dir,
            Command::Ablate(a) | Command::Bench(a) => &mut a.out_dir,
        }
    }

    fn args_json(&self) -> Result<serde_json::Value> {
        Ok(match self {
            Command::Mask(a) => serde_json::to_value(a)?,
            Command::Train(a) => serde_json::to_value(a)?,
            Command::Impute(a) => serde_json::to_value(a)?,
            Command::Eval(a) => serde_json::to_value(a)?,
            Command::Ablate(a) | Command::Bench(a) => serde_json::to_value(a)?,
        })
    }

    fn from_json(name: &str, args: serde_json::Value) -> Result<Self> {
        Ok(match name {
            "mask" => Command::Mask(serde_json::from_value(args)?),
            "train" => Command::Train(serde_json::from_value(args)?),
            "impute" => Command::Impute(serde_json::from_value(args)?),
            "eval" => Command::Eval(serde_json::from_value(args)?),
            "ablate" => Command::Ablate(serde_json::from_value(args)?),
            "bench" => Command::Bench(serde_json::from_value(args)?),
            other => return Err(Error::Config(format!("unknown command '{other}' in run config"))),
        })
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TokenArgs {
    /// Cell spellings read as missing (case-insensitive).
    #[arg(long, value_delimiter = ',', default_values_t = default_missing_tokens())]
    pub missing_tokens: Vec<String>,
}

impl TokenArgs {
    fn read(&self, path: &Path) -> Result<RawTable> {
        RawTable::read_path(path, &ReadOptions { missing_tokens: self.missing_tokens.clone() })
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MaskArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Probability of hiding each observed cell, in (0, 1).
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict masking to these columns (default: all).
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
    /// Column type overrides, `name=continuous|categorical`.
    #[arg(long, value_delimiter = ',')]
    pub types: Vec<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Column type overrides, `name=continuous|categorical`.
    #[arg(long, value_delimiter = ',')]
    pub types: Vec<String>,
    /// Use this schema instead of inferring one.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_CATEGORIES)]
    pub max_categories: usize,
    /// Continue from a checkpoint; its schema, schedule, model and training
    /// settings are used unless overridden.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub tokens: TokenArgs,

    /// linear | quadratic [default: quadratic]
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    /// Diffusion length T [default: 100]
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    /// [default: 1e-4]
    #[arg(long)]
    pub beta_min: Option<f64>,
    /// [default: 0.3]
    #[arg(long)]
    pub beta_max: Option<f64>,

    /// Residual blocks [default: 4]
    #[arg(long)]
    pub depth: Option<usize>,
    /// Hidden width [default: 128]
    #[arg(long)]
    pub width: Option<usize>,
    /// Time-embedding size [default: 32]
    #[arg(long)]
    pub time_dim: Option<usize>,

    /// Total epochs [default: 200]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 1e-3]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    /// [default: 0.999]
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    /// [default: 1e-8]
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    pub mask_ratio_min: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    pub mask_ratio_max: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save checkpoint.bin every N epochs; 0 saves only at the end [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = Method::Ddim)]
    pub method: Method,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Subsequence length S [default: T]
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// single | median [default: single for one sample, median otherwise]
    #[arg(long)]
    pub agg: Option<Aggregation>,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    /// Starting point: zero | noise | auto (zero when eta = 0 under ddim)
    #[arg(long, default_value_t = InitMode::Auto)]
    pub init: InitMode,
}

impl SamplerArgs {
    fn resolve(&self, schedule: &NoiseSchedule) -> SamplerConfig {
        SamplerConfig {
            method: self.method,
            eta: self.eta,
            steps: self.steps.unwrap_or(schedule.steps()),
            n_samples: self.samples,
            aggregation: self
                .agg
                .unwrap_or(if self.samples > 1 { Aggregation::Median } else { Aggregation::Single }),
            init_seed: self.init_seed,
            init: self.init,
        }
        .resolved()
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ImputeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampler: SamplerArgs,
    /// Worker threads for row-parallel sampling; output does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub completed: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Schema holding the standardization statistics (or use --checkpoint).
    #[arg(long, required_unless_present = "checkpoint")]
    pub schema: Option<PathBuf>,
    #[arg(long, conflicts_with = "schema")]
    pub checkpoint: Option<PathBuf>,
    /// timing.json from the impute run, echoed into the report.
    #[arg(long)]
    pub timing: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GridArgs {
    /// Masked CSV to impute.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Truth sidecar from `mask`.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub etas: Vec<f64>,
    #[arg(long = "steps-list", value_delimiter = ',')]
    pub steps_list: Vec<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Use init_seed + r for repeat r.
    #[arg(long)]
    pub vary_seed: bool,
    #[arg(long, default_value_t = Method::Ddim)]
    pub method: Method,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long)]
    pub agg: Option<Aggregation>,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long, default_value_t = InitMode::Auto)]
    pub init: InitMode,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tool: String,
    pub version: String,
    pub checkpoint_format: String,
    pub command: String,
    pub args: serde_json::Value,
    /// Effective settings after defaults and checkpoint values are applied.
    pub resolved: serde_json::Value,
}

pub fn run(cli: Cli) -> Result<()> {
    let command = match (cli.command, cli.config) {
        (Some(cmd), None) => cmd,
        (None, Some(path)) => {
            let rc: RunConfig = serde_json::from_slice(&fs::read(&path)?)?;
            let mut cmd = Command::from_json(&rc.command, rc.args)?;
            if let Some(dir) = cli.replay_out_dir {
                *cmd.out_dir_mut() = dir;
            }
            cmd
        }
        _ => return Err(Error::param("give a subcommand or --config RUN_CONFIG")),
    };
    execute(&command)
}

pub fn execute(command: &Command) -> Result<()> {
    let resolved = match command {
        Command::Mask(a) => cmd_mask(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Impute(a) => cmd_impute(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Ablate(a) => cmd_grid(a, GridDefaults::ABLATE)?,
        Command::Bench(a) => cmd_grid(a, GridDefaults::BENCH)?,
    };
    let mut cmd = command.clone();
    let out_dir = cmd.out_dir_mut().clone();
    let rc = RunConfig {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        checkpoint_format: FORMAT_NAME.into(),
        command: command.name().into(),
        args: command.args_json()?,
        resolved,
    };
    write_json(&out_dir.join("run_config.json"), &rc)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn parse_types(specs: &[String]) -> Result<HashMap<String, ColumnKind>> {
    specs
        .iter()
        .map(|s| {
            let (name, kind) = s
                .split_once('=')
                .ok_or_else(|| Error::param(format!("--types entry '{s}' is not name=kind")))?;
            Ok((name.to_string(), kind.parse()?))
        })
        .collect()
}

fn check_threads(threads: usize) -> Result<rayon::ThreadPool> {
    if threads == 0 {
        return Err(Error::param("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))
}

fn cmd_mask(a: &MaskArgs) -> Result<serde_json::Value> {
    if !(a.rate > 0.0 && a.rate < 1.0) {
        return Err(Error::param(format!("--rate must lie in (0, 1) (got {})", a.rate)));
    }
    let table = a.tokens.read(&a.input)?;
    let dataset = TabularDataset::from_table_inferred(&table, &parse_types(&a.types)?)?;
    let columns: Vec<usize> = if a.columns.is_empty() {
        (0..dataset.n_columns()).collect()
    } else {
        a.columns
            .iter()
            .map(|c| {
                dataset
                    .schema()
                    .column_index(c)
                    .ok_or_else(|| Error::param(format!("--columns names unknown column '{c}'")))
            })
            .collect::<Result<_>>()?
    };
    let masked = dataset.simulate_mcar_columns(a.rate, a.seed, &columns)?;
    fs::create_dir_all(&a.out_dir)?;
    masked.to_table().write_path(&a.out_dir.join("masked.csv"))?;
    masked.write_truth_sidecar(&a.out_dir.join("truth.csv"))?;
    masked.write_mask_sidecar(&a.out_dir.join("mask.csv"))?;
    eprintln!(
        "masked {} of {} cells",
        masked.simulated_cells().len(),
        dataset.n_rows() * dataset.n_columns()
    );
    Ok(json!({
        "rate": a.rate,
        "seed": a.seed,
        "columns": columns.iter().map(|&j| dataset.schema().columns[j].name.clone()).collect::<Vec<_>>(),
        "simulated_cells": masked.simulated_cells().len(),
    }))
}

fn cmd_train(a: &TrainArgs) -> Result<serde_json::Value> {
    let table = a.tokens.read(&a.input)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;

    let schema = match (&resume, &a.schema) {
        (Some(ck), _) => ck.meta.schema.clone(),
        (None, Some(path)) => Schema::load(path)?,
        (None, None) => infer_schema(&table, &parse_types(&a.types)?, a.max_categories)?,
    };
    let dataset = TabularDataset::from_table(&table, schema)?;

    let base_sched = resume.as_ref().map_or_else(ScheduleParams::default, |ck| ck.meta.schedule);
    let sched_params = ScheduleParams {
        kind: a.schedule.unwrap_or(base_sched.kind),
        steps: a.diffusion_steps.unwrap_or(base_sched.steps),
        beta_min: a.beta_min.unwrap_or(base_sched.beta_min),
        beta_max: a.beta_max.unwrap_or(base_sched.beta_max),
    };
    let schedule = sched_params.build()?;

    let base_arch = resume.as_ref().map_or_else(Architecture::default, |ck| ck.meta.architecture);
    let arch = Architecture {
        d_enc: dataset.schema().d_enc,
        depth: a.depth.unwrap_or(base_arch.depth),
        width: a.width.unwrap_or(base_arch.width),
        time_embed_dim: a.time_dim.unwrap_or(base_arch.time_embed_dim),
    };

    let base_cfg = resume
        .as_ref()
        .and_then(|ck| ck.meta.train_config.clone())
        .unwrap_or_default();
    let config = TrainConfig {
        epochs: a.epochs.unwrap_or(base_cfg.epochs),
        batch_size: a.batch_size.unwrap_or(base_cfg.batch_size),
        learning_rate: a.lr.unwrap_or(base_cfg.learning_rate),
        adam_beta1: a.adam_beta1.unwrap_or(base_cfg.adam_beta1),
        adam_beta2: a.adam_beta2.unwrap_or(base_cfg.adam_beta2),
        adam_eps: a.adam_eps.unwrap_or(base_cfg.adam_eps),
        mask_ratio_min: a.mask_ratio_min.unwrap_or(base_cfg.mask_ratio_min),
        mask_ratio_max: a.mask_ratio_max.unwrap_or(base_cfg.mask_ratio_max),
        seed: a.seed.unwrap_or(base_cfg.seed),
        checkpoint_every: a.checkpoint_every.unwrap_or(base_cfg.checkpoint_every),
    };
    config.validate()?;

    let state = match &resume {
        Some(ck) => {
            if ck.meta.schedule != sched_params || ck.meta.architecture != arch {
                return Err(Error::Config("schedule and model flags must match the resumed checkpoint".into()));
            }
            if ck.meta.seed != config.seed {
                return Err(Error::Config(format!(
                    "--seed {} differs from the checkpoint's seed {}",
                    config.seed, ck.meta.seed
                )));
            }
            ck.training_state()?
        }
        None => TrainingState::fresh(arch, config.seed)?,
    };

    fs::create_dir_all(&a.out_dir)?;
    let ck_path = a.out_dir.join("checkpoint.bin");
    let save = |state: &TrainingState| {
        Checkpoint::from_training(state, sched_params, dataset.schema(), Some(&config)).save(&ck_path)
    };
    let state = train_from(state, &dataset, &schedule, &config, |s| {
        let e = s.epochs_completed;
        eprintln!("epoch {e}/{} mean_loss {:.6}", config.epochs, s.loss_history[e - 1]);
        if config.checkpoint_every > 0 && e % config.checkpoint_every == 0 {
            save(s)?;
        }
        Ok(())
    })?;
    save(&state)?;
    dataset.schema().save(&a.out_dir.join("schema.json"))?;

    let mut wtr = csv::Writer::from_path(a.out_dir.join("loss.csv"))?;
    wtr.write_record(["epoch", "mean_loss"])?;
    for (e, l) in state.loss_history.iter().enumerate() {
        wtr.write_record([(e + 1).to_string(), format_number(*l)])?;
    }
    wtr.flush()?;

    Ok(json!({
        "schedule": sched_params,
        "architecture": arch,
        "train_config": config,
        "schema_hash": dataset.schema().hash,
        "epochs_completed": state.epochs_completed,
    }))
}

fn load_for_sampling(input: &Path, checkpoint: &Path, tokens: &TokenArgs) -> Result<(Checkpoint, NoiseSchedule, TabularDataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let schedule = ck.meta.schedule.build()?;
    let table = tokens.read(input)?;
    let dataset = TabularDataset::from_table(&table, ck.meta.schema.clone())?;
    Ok((ck, schedule, dataset))
}

fn cmd_impute(a: &ImputeArgs) -> Result<serde_json::Value> {
    let pool = check_threads(a.threads)?;
    let (ck, schedule, dataset) = load_for_sampling(&a.input, &a.checkpoint, &a.tokens)?;
    let config = a.sampler.resolve(&schedule);
    let result = pool.install(|| impute_dataset(&dataset, &ck.model, &ck.meta.schema_hash, &schedule, &config))?;

    fs::create_dir_all(&a.out_dir)?;
    result.table.write_path(&a.out_dir.join("completed.csv"))?;
    result.write_provenance(&a.out_dir.join("provenance.csv"))?;
    write_json(
        &a.out_dir.join("timing.json"),
        &json!({
            "wall_time_s": result.wall_time_s,
            "rows_imputed": result.rows_imputed,
            "threads": a.threads,
            "sampler": config,
        }),
    )?;
    eprintln!("imputed {} rows in {:.3}s", result.rows_imputed, result.wall_time_s);
    Ok(json!({
        "sampler": config,
        "schedule": ck.meta.schedule,
        "architecture": ck.meta.architecture,
        "schema_hash": ck.meta.schema_hash,
        "threads": a.threads,
    }))
}

fn cmd_eval(a: &EvalArgs) -> Result<serde_json::Value> {
    let schema = match (&a.schema, &a.checkpoint) {
        (Some(path), _) => Schema::load(path)?,
        (None, Some(path)) => Checkpoint::load(path)?.meta.schema,
        (None, None) => return Err(Error::param("eval needs --schema or --checkpoint")),
    };
    let completed = a.tokens.read(&a.completed)?;
    let truth = read_truth_sidecar(&a.truth)?;
    let simulated: HashSet<(usize, String)> = read_mask_sidecar(&a.mask)?
        .into_iter()
        .filter(|(_, _, s)| *s == MissingStatus::Simulated)
        .map(|(r, c, _)| (r, c))
        .collect();
    if let Some((r, c, _)) = truth.iter().find(|(r, c, _)| !simulated.contains(&(*r, c.clone()))) {
        return Err(Error::Schema(format!(
            "truth sidecar cell (row {r}, column '{c}') is not marked simulated in the mask sidecar"
        )));
    }
    let scores = score_files(&schema, &completed, &truth)?;
    let timing: Option<serde_json::Value> = a
        .timing
        .as_deref()
        .map(|p| fs::read(p).map_err(Error::from).and_then(|b| Ok(serde_json::from_slice(&b)?)))
        .transpose()?;
    let wall = timing.as_ref().and_then(|t| t.get("wall_time_s")).and_then(|v| v.as_f64());
    let config = json!({
        "schema_hash": schema.hash,
        "sampler": timing.as_ref().and_then(|t| t.get("sampler")).cloned(),
    });
    let report = MetricsReport::from_runs(&[scores], wall, config.clone())?;
    fs::create_dir_all(&a.out_dir)?;
    report.save(&a.out_dir.join("metrics.json"))?;
    match report.rmse_continuous {
        Some(r) => eprintln!("rmse {r:.6} over {} continuous cells", report.n_continuous),
        None => eprintln!("no continuous cells were masked"),
    }
    Ok(config)
}

struct GridDefaults {
    etas: &'static [f64],
    steps: &'static [usize],
    repeats: usize,
}

impl GridDefaults {
    const ABLATE: Self = Self { etas: &[0.0, 0.5, 1.0], steps: &[25, 50, 75, 100], repeats: 1 };
    const BENCH: Self = Self { etas: &[0.0], steps: &[20, 50, 100], repeats: 3 };
}

fn cmd_grid(a: &GridArgs, defaults: GridDefaults) -> Result<serde_json::Value> {
    let pool = check_threads(a.threads)?;
    let (ck, schedule, dataset) = load_for_sampling(&a.input, &a.checkpoint, &a.tokens)?;
    let truth = read_truth_sidecar(&a.truth)?
        .into_iter()
        .map(|(r, c, v)| {
            let j = dataset
                .schema()
                .column_index(&c)
                .ok_or_else(|| Error::Schema(format!("truth sidecar names unknown column '{c}'")))?;
            Ok((r, j, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = dataset.with_simulated_truth(&truth)?;

    let pick = |given: &[usize], default: &[usize]| {
        if given.is_empty() { default.to_vec() } else { given.to_vec() }
    };
    let grid = GridSpec {
        etas: if a.etas.is_empty() { defaults.etas.to_vec() } else { a.etas.clone() },
        steps: pick(&a.steps_list, defaults.steps).into_iter().map(|s| s.min(schedule.steps())).collect(),
        repeats: a.repeats.unwrap_or(defaults.repeats),
        vary_seed: a.vary_seed,
    };
    let base = SamplerArgs {
        method: a.method,
        eta: 0.0,
        steps: None,
        samples: a.samples,
        agg: a.agg,
        init_seed: a.init_seed,
        init: a.init,
    }
    .resolve(&schedule);
    // Init stays `auto` so each grid cell resolves it for its own eta.
    let base = SamplerConfig { init: a.init, ..base };
    let rows = pool.install(|| benchmark_grid(&dataset, &ck.model, &ck.meta.schema_hash, &schedule, &base, &grid))?;
    fs::create_dir_all(&a.out_dir)?;
    write_grid(&rows, &a.out_dir.join("grid.csv"))?;
    for r in &rows {
        eprintln!(
            "eta {} steps {}: rmse {} time {:.3}s",
            r.eta,
            r.steps,
            r.rmse_mean.map_or("-".into(), |v| format!("{v:.4}")),
            r.wall_time_s
        );
    }
    Ok(json!({ "grid": grid, "sampler": base, "schema_hash": ck.meta.schema_hash }))
}
