//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or config
//! error, 3 training divergence.

use super::{aggregate_dir, run_experiment, ExperimentConfig, HarnessError};
use crate::agents::{bc_train, train_agent, BcConfig, Learner, Td3Config};
use crate::demos::{generate_demos, DemoDataset, DemoKind};
use crate::env::{EnvConfig, Variant};
use crate::flow::{train_flow, FlowError, FlowModel, FlowTrainConfig};
use crate::gan::{train_gan, GanError, GanModel, GanTrainConfig};
use crate::shaping::Potential;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

const EXIT_FAILURE: i32 = 1;
const EXIT_USAGE: i32 = 2;
const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "demo-shaping", version, about = "Reward shaping from demonstrations", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scripted demonstrations.
    #[command(subcommand, arg_required_else_help = true)]
    Demos(DemosCommand),
    /// Potential pre-training.
    #[command(subcommand, arg_required_else_help = true)]
    Potential(PotentialCommand),
    /// Agent training.
    #[command(subcommand, arg_required_else_help = true)]
    Agent(AgentCommand),
    /// Multi-seed experiments.
    #[command(subcommand, arg_required_else_help = true)]
    Experiment(ExperimentCommand),
    /// Aggregate seed records into a learning-curve CSV.
    Aggregate(AggregateArgs),
}

#[derive(Subcommand, Debug)]
enum DemosCommand {
    /// Roll out a scripted demonstrator and write `(s, a)` pairs as JSONL.
    Generate(GenerateArgs),
}

#[derive(Subcommand, Debug)]
enum PotentialCommand {
    /// Fit a flow or GAN potential to a demo file.
    Train(PotentialArgs),
}

#[derive(Subcommand, Debug)]
enum AgentCommand {
    /// Train one agent and save its actor.
    Train(AgentArgs),
}

#[derive(Subcommand, Debug)]
enum ExperimentCommand {
    /// Run every method of a config on every seed.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value = "peg-2d")]
    variant: Variant,
    #[arg(long, default_value = "optimal")]
    kind: DemoKind,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    /// Gaussian action noise of the demonstrator.
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelKind {
    Flow,
    Gan,
}

#[derive(Args, Debug)]
struct PotentialArgs {
    #[arg(long, value_enum)]
    kind: ModelKind,
    #[arg(long)]
    demos: PathBuf,
    /// TOML file with optional `[flow]` and `[gan]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AgentArg {
    Td3Shaped,
    Td3,
    Bc,
    Td3Bc,
}

#[derive(Args, Debug)]
struct AgentArgs {
    #[arg(long, value_enum)]
    agent: AgentArg,
    #[arg(long, default_value = "peg-2d")]
    variant: Variant,
    /// Demo file (required for bc and td3-bc; adds demo states to the
    /// td3-shaped actor batch).
    #[arg(long)]
    demos: Option<PathBuf>,
    /// Potential checkpoint written by `potential train`.
    #[arg(long)]
    potential: Option<PathBuf>,
    #[arg(long, value_enum, requires = "potential")]
    potential_kind: Option<ModelKind>,
    /// Potential scale c.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Flow density floor ε.
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    #[arg(long)]
    lambda: Option<f64>,
    /// TOML file with optional `[env]`, `[td3]` and `[bc]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Actor checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Learning-curve JSONL path.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Stage config for the single-step commands; one file can serve all of them.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StageFile {
    env: Option<EnvConfig>,
    flow: FlowTrainConfig,
    gan: GanTrainConfig,
    td3: Td3Config,
    bc: BcConfig,
}

/// A failure with its exit code.
struct Failure(i32, String);

impl Failure {
    fn usage(msg: impl std::fmt::Display) -> Self {
        Failure(EXIT_USAGE, msg.to_string())
    }

    fn runtime(msg: impl std::fmt::Display) -> Self {
        Failure(EXIT_FAILURE, msg.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match &e {
            HarnessError::Config(_) => Failure::usage(e),
            HarnessError::Training { source, .. } if source.is_divergence() => Failure(EXIT_DIVERGED, e.to_string()),
            _ => Failure::runtime(e),
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_demos(path: &Path) -> Result<DemoDataset, Failure> {
    DemoDataset::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn flow_failure(e: FlowError) -> Failure {
    match e {
        FlowError::Diverged { .. } | FlowError::NonFinite { .. } => Failure(EXIT_DIVERGED, e.to_string()),
        FlowError::InvalidConfig(_) => Failure::usage(e),
        e => Failure::runtime(e),
    }
}

fn gan_failure(e: GanError) -> Failure {
    match e {
        GanError::Diverged { .. } => Failure(EXIT_DIVERGED, e.to_string()),
        GanError::InvalidConfig(_) => Failure::usage(e),
        e => Failure::runtime(e),
    }
}

fn demos_generate(a: GenerateArgs) -> Result<(), Failure> {
    let env = EnvConfig::with_variant(a.variant);
    let data = generate_demos(&env, a.kind, a.episodes, a.noise, a.seed).map_err(Failure::usage)?;
    data.save(&a.out).map_err(|e| Failure::runtime(format!("{}: {e}", a.out.display())))?;
    eprintln!("wrote {} pairs to {}", data.len(), a.out.display());
    Ok(())
}

fn potential_train(a: PotentialArgs) -> Result<(), Failure> {
    let cfg: StageFile = read_toml(a.config.as_deref())?;
    let demos = load_demos(&a.demos)?;
    match a.kind {
        ModelKind::Flow => {
            let fit = train_flow(&demos, &cfg.flow, a.seed).map_err(flow_failure)?;
            fit.model.save(&a.out).map_err(flow_failure)?;
            eprintln!("final loss {:.4}", fit.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        ModelKind::Gan => {
            let fit = train_gan(&demos, &cfg.gan, a.seed).map_err(gan_failure)?;
            fit.model.save(&a.out).map_err(gan_failure)?;
            if let Some(s) = fit.history.last() {
                eprintln!("final critic loss {:.4}, L1 {:.4}", s.critic_loss, s.l1);
            }
        }
    }
    Ok(())
}

fn agent_train(a: AgentArgs) -> Result<(), Failure> {
    let file: StageFile = read_toml(a.config.as_deref())?;
    let env = file.env.unwrap_or_else(|| EnvConfig::with_variant(a.variant));
    let demos = a.demos.as_deref().map(load_demos).transpose()?;
    let phi = match (a.potential.as_deref(), a.potential_kind) {
        (None, _) => Potential::Zero,
        (Some(_), None) => return Err(Failure::usage("--potential needs --potential-kind")),
        (Some(p), Some(ModelKind::Flow)) => {
            let model = FlowModel::load(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            Potential::Flow { model: Arc::new(model), scale: a.scale, floor: a.floor }
        }
        (Some(p), Some(ModelKind::Gan)) => {
            let model = GanModel::load(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            Potential::Gan { model: Arc::new(model), scale: a.scale }
        }
    };
    let mut curve_file = match &a.curve {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let policy = match a.agent {
        AgentArg::Bc => {
            let demos = demos.ok_or_else(|| Failure::usage("bc needs --demos"))?;
            let mut policy = bc_train(&demos, env.action_bound, &file.bc, a.seed).map_err(Failure::usage)?.policy;
            let r = crate::agents::evaluate(&mut policy, &env, file.td3.eval_episodes, a.seed).map_err(Failure::runtime)?;
            eprintln!("success {:.2}  return {:.1}", r.success_rate, r.mean_return);
            policy
        }
        kind => {
            let learner = match kind {
                AgentArg::Td3 => Learner::Td3,
                AgentArg::Td3Shaped => Learner::Td3Shaped,
                _ => {
                    let lambda = a.lambda.ok_or_else(|| Failure::usage("td3-bc needs --lambda"))?;
                    if demos.is_none() {
                        return Err(Failure::usage("td3-bc needs --demos"));
                    }
                    Learner::Td3Bc { lambda }
                }
            };
            let out = train_agent(&env, &phi, demos.as_ref(), learner, &file.td3, a.seed, |p| {
                eprintln!("episodes {:>5}  success {:.2}  return {:.1}", p.episodes, p.success_rate, p.mean_return);
                if let Some(f) = curve_file.as_mut() {
                    let _ = writeln!(f, "{}", serde_json::to_string(p).expect("curve point serializes"));
                }
            })
            .map_err(|e| match e {
                crate::agents::AgentError::NonFinite { .. } => Failure(EXIT_DIVERGED, e.to_string()),
                crate::agents::AgentError::InvalidConfig(_) => Failure::usage(e),
                e => Failure::runtime(e),
            })?;
            out.policy
        }
    };
    policy.save(&a.out).map_err(|e| Failure::runtime(format!("{}: {e}", a.out.display())))?;
    Ok(())
}

fn experiment_run(a: RunArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let status = run_experiment(&cfg, |line| eprintln!("{line}"))?;
    if let Some(f) = status.failed.first() {
        let code = if status.failed.iter().any(|f| f.divergence) { EXIT_DIVERGED } else { EXIT_FAILURE };
        return Err(Failure(code, format!("{} seed(s) failed; first: {} seed {}: {}", status.failed.len(), f.method, f.seed, f.error)));
    }
    Ok(())
}

fn aggregate(a: AggregateArgs) -> Result<(), Failure> {
    for path in aggregate_dir(&a.input, &a.out)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Demos(DemosCommand::Generate(a)) => demos_generate(a),
        Command::Potential(PotentialCommand::Train(a)) => potential_train(a),
        Command::Agent(AgentCommand::Train(a)) => agent_train(a),
        Command::Experiment(ExperimentCommand::Run(a)) => experiment_run(a),
        Command::Aggregate(a) => aggregate(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}
