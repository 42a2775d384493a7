//! Command-line front end.
//!
//! Every command writes into one output directory: its artifacts, a report
//! JSON that echoes the resolved run configuration, and `manifest.json`
//! listing the files written. The manifest is the only output that carries a
//! timestamp or the output directory, so reports from identical configs are
//! byte-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{self, DataError};
use crate::eval::{self, EvalError, Pairing};
use crate::imitation::{self, ImitationError};
use crate::mpc::MpcError;
use crate::nn::{self, NnError};
use crate::plant::RegimeMix;
use crate::policy::NeuralPolicy;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_IO,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NumericalFailure { .. } => CliError::Numerical(e.to_string()),
            NnError::InvalidConfig(_) | NnError::EmptyTrainingSet => CliError::Config(e.to_string()),
            NnError::Io { .. } | NnError::Malformed(_) | NnError::ShapeMismatch { .. } | NnError::VersionMismatch { .. } => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<MpcError> for CliError {
    fn from(e: MpcError) -> Self {
        match e {
            MpcError::InvalidConfig(_) | MpcError::HorizonMismatch { .. } => CliError::Config(e.to_string()),
            MpcError::Divergence(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Mpc(m) => m.into(),
            DataError::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Mpc(m) => m.into(),
            EvalError::InvalidConfig(_) => CliError::Config(e.to_string()),
            EvalError::Io { .. } | EvalError::Malformed { .. } => CliError::Io(e.to_string()),
            EvalError::LengthMismatch { .. } | EvalError::Empty => CliError::Other(e.to_string()),
        }
    }
}

impl From<ImitationError> for CliError {
    fn from(e: ImitationError) -> Self {
        match e {
            ImitationError::InvalidConfig(m) => CliError::Config(m),
            ImitationError::Data(e) => e.into(),
            ImitationError::Nn(e) => e.into(),
            ImitationError::Eval(e) => e.into(),
            ImitationError::Mpc(e) => e.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mpcnn", version, about = "Learn a neural approximation of a bicycle-robot MPC")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an expert dataset from closed-loop MPC simulations.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        n_sims: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
    },
    /// Train a network once on expert data (behavioral cloning).
    Bc {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        n_sims: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
        /// Train on this CSV instead of generating data.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Gaussian state perturbation: one value for all components or four comma-separated.
        #[arg(long, value_delimiter = ',', num_args = 1..=4)]
        perturb_sigma: Option<Vec<f64>>,
        /// Relabel perturbed states with the MPC (default true).
        #[arg(long)]
        relabel: Option<bool>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run DAgger and write per-iteration checkpoints.
    Dagger {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        save_datasets: bool,
    },
    /// Evaluate a model against the MPC and export trajectories.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n_sims: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
        #[arg(long, value_enum)]
        pairing: Option<PairingArg>,
    },
    /// Print the fully resolved configuration as JSON.
    Config {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for rollouts and labeling (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    Inside,
    Outside,
    Mixed,
}

impl From<RegimeArg> for RegimeMix {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Inside => RegimeMix::Inside,
            RegimeArg::Outside => RegimeMix::Outside,
            RegimeArg::Mixed => RegimeMix::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PairingArg {
    OnPolicy,
    Independent,
}

impl From<PairingArg> for Pairing {
    fn from(p: PairingArg) -> Self {
        match p {
            PairingArg::OnPolicy => Pairing::OnPolicyStates,
            PairingArg::Independent => Pairing::IndependentTrajectories,
        }
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn finish(cfg: RunConfig) -> Result<RunConfig, CliError> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

/// Config echo for reports: everything except the output directory.
fn config_echo(cfg: &RunConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("out_dir");
    }
    v
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_manifest(cfg: &RunConfig, command: &str, files: &[String]) -> Result<(), CliError> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "command": command,
        "created_unix": created,
        "out_dir": cfg.out_dir,
        "files": files,
        "config": cfg,
    });
    write_json(&cfg.out_dir.join(MANIFEST), &manifest)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = match &cli.command {
        Command::Generate { common, .. }
        | Command::Bc { common, .. }
        | Command::Dagger { common, .. }
        | Command::Eval { common, .. }
        | Command::Config { common } => common.threads,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Other(e.to_string()))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { common, n_sims, steps, regime } => {
            let mut cfg = base_config(&common)?;
            if let Some(n) = n_sims {
                cfg.generate.n_sims = n;
            }
            if let Some(s) = steps {
                cfg.generate.steps_per_sim = s;
            }
            if let Some(r) = regime {
                cfg.generate.regime = r.into();
            }
            cmd_generate(&finish(cfg)?)
        }
        Command::Bc { common, n_sims, steps, regime, dataset, perturb_sigma, relabel, epochs } => {
            let mut cfg = base_config(&common)?;
            if let Some(n) = n_sims {
                cfg.bc.n_sims = n;
            }
            if let Some(s) = steps {
                cfg.bc.steps_per_sim = s;
            }
            if let Some(r) = regime {
                cfg.bc.regime = r.into();
            }
            if let Some(d) = dataset {
                cfg.paths.bc_dataset = Some(d);
            }
            if let Some(sigma) = perturb_sigma {
                cfg.bc.perturb_sigma = Some(match sigma.as_slice() {
                    [s] => [*s; 4],
                    [a, b, c, d] => [*a, *b, *c, *d],
                    _ => return Err(CliError::Config("--perturb-sigma takes 1 or 4 values".into())),
                });
            }
            if let Some(r) = relabel {
                cfg.bc.relabel = r;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cmd_bc(&finish(cfg)?)
        }
        Command::Dagger { common, iterations, save_datasets } => {
            let mut cfg = base_config(&common)?;
            if let Some(n) = iterations {
                cfg.dagger.iterations = n;
            }
            cfg.dagger.save_datasets |= save_datasets;
            cmd_dagger(&finish(cfg)?)
        }
        Command::Eval { common, model, n_sims, steps, regime, pairing } => {
            let mut cfg = base_config(&common)?;
            if let Some(m) = model {
                cfg.paths.model = Some(m);
            }
            if let Some(n) = n_sims {
                cfg.eval.n_sims = n;
            }
            if let Some(s) = steps {
                cfg.eval.steps = s;
            }
            if let Some(r) = regime {
                cfg.eval.regime = r.into();
            }
            if let Some(p) = pairing {
                cfg.eval.pairing = p.into();
            }
            cmd_eval(&finish(cfg)?)
        }
        Command::Config { common } => {
            let cfg = finish(base_config(&common)?)?;
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
    }
}

fn create_out(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<(), CliError> {
    create_out(cfg)?;
    let gen_cfg = cfg.generation_config();
    let (dataset, report) = data::generate_expert_dataset(&gen_cfg, &cfg.mpc)?;
    data::save_csv(&dataset, &cfg.out_dir.join("dataset.csv"))?;
    write_json(
        &cfg.out_dir.join("generation_report.json"),
        &json!({ "run_config": config_echo(cfg), "report": report }),
    )?;
    write_manifest(cfg, "generate", &["dataset.csv".into(), "generation_report.json".into()])?;
    eprintln!(
        "generated {} samples from {} simulations ({} diverged)",
        report.samples, gen_cfg.n_sims, report.divergences
    );
    Ok(())
}

pub fn cmd_bc(cfg: &RunConfig) -> Result<(), CliError> {
    create_out(cfg)?;
    let (params, report) = imitation::behavioral_clone(&cfg.bc_config())?;
    nn::save_params(&params, &cfg.out_dir.join("model.bin"))?;
    write_json(
        &cfg.out_dir.join("bc_report.json"),
        &json!({ "run_config": config_echo(cfg), "report": report }),
    )?;
    write_manifest(cfg, "bc", &["model.bin".into(), "bc_report.json".into()])?;
    let last = report.history.epochs.last().expect("training ran at least one epoch");
    eprintln!(
        "trained on {} samples; best epoch {}, final train loss {:.5}",
        report.train_size, report.history.best_epoch, last.train_loss
    );
    Ok(())
}

pub fn cmd_dagger(cfg: &RunConfig) -> Result<(), CliError> {
    create_out(cfg)?;
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let mut files = Vec::new();
    let mut write_err: Option<CliError> = None;
    let outcome = imitation::dagger_with(&cfg.dagger_config(), |it, params| {
        let name = if it.iteration == 0 {
            "initial_model.bin".to_string()
        } else {
            format!("checkpoints/iter_{:02}.bin", it.iteration)
        };
        if let Err(e) = nn::save_params(params, &cfg.out_dir.join(&name)) {
            write_err.get_or_insert(e.into());
        }
        files.push(name);
        eprintln!(
            "iteration {}: train {} val {} rmse {:.5}",
            it.iteration, it.train_size, it.val_size, it.eval.rmse_overall
        );
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    nn::save_params(&outcome.params, &cfg.out_dir.join("model.bin"))?;
    files.push("model.bin".into());
    if cfg.dagger.save_datasets {
        let dir = cfg.out_dir.join("datasets");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (k, d) in outcome.collected.iter().enumerate() {
            let name = format!("datasets/iter_{k:02}.csv");
            data::save_csv(d, &cfg.out_dir.join(&name))?;
            files.push(name);
        }
    }
    write_json(
        &cfg.out_dir.join("dagger_report.json"),
        &json!({ "run_config": config_echo(cfg), "report": outcome.report }),
    )?;
    files.push("dagger_report.json".into());
    write_manifest(cfg, "dagger", &files)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let model_path = cfg
        .paths
        .model
        .as_ref()
        .ok_or_else(|| CliError::Config("no model given: pass --model or set paths.model".into()))?;
    let params = nn::load_params(model_path)?;
    create_out(cfg)?;
    let eval_cfg = cfg.eval_config();
    let policy = NeuralPolicy { params: &params, bounds: cfg.mpc.bounds };
    let evaluation = eval::evaluate_with_rollouts(&policy, &eval_cfg, &cfg.mpc)?;
    let traj_dir = cfg.out_dir.join("trajectories");
    let manifest = eval::export_trajectories(&evaluation.rollouts, &traj_dir, config_echo(cfg))?;
    write_json(
        &cfg.out_dir.join("eval_report.json"),
        &json!({ "run_config": config_echo(cfg), "report": evaluation.report }),
    )?;
    let mut files = vec!["eval_report.json".to_string(), format!("trajectories/{}", eval::TRAJECTORY_MANIFEST)];
    files.extend(manifest.files.iter().map(|f| format!("trajectories/{}", f.file)));
    write_manifest(cfg, "eval", &files)?;
    eprintln!(
        "rmse {:.5} over {} samples, {} of {} simulations diverged",
        evaluation.report.rmse_overall, evaluation.report.pooled_n, evaluation.report.divergence_count, eval_cfg.n_sims
    );
    Ok(())
}
