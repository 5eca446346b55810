mod commands;
mod error;
mod manifest;
mod policies;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use procalloc::eval::{Dynamics, EvalConfig};
use procalloc::mdp::{DEFAULT_KAPPA, DEFAULT_MAX_STATES, DEFAULT_OVERFLOW_PENALTY};
use procalloc::model::{compose, resolve_scenario_ref};
use procalloc::policy::{Heuristic, Optimizer};
use procalloc::reward::RewardKind;
use procalloc::rollout::RolloutConfig;
use procalloc::ProcessModel;

use commands::RunContext;
use error::CliError;
use manifest::{CompareJob, Job, RunManifest, ScenarioRecord, SimulateJob, SolveJob, MANIFEST_VERSION};

/// Resource allocation in business processes: rollout-trained policies,
/// exact solutions of small instances, and paired evaluations.
#[derive(Parser, Debug)]
#[command(name = "procalloc", version)]
struct Cli {
    /// Master seed of every random stream.
    #[arg(long, global = true, env = "PROCALLOC_SEED", default_value_t = 0)]
    seed: u64,

    /// Cap on parallel worker threads (results do not depend on it).
    #[arg(long, global = true, env = "PROCALLOC_WORKERS")]
    workers: Option<usize>,

    /// Directory receiving all output files and the run manifest.
    #[arg(long, global = true, env = "PROCALLOC_OUT", default_value = "procalloc-out")]
    out: PathBuf,

    /// Log progress details to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy by rollout-based policy iteration.
    Train(TrainArgs),
    /// Solve the uniformized, queue-bounded model exactly.
    Solve(SolveArgs),
    /// Evaluate several policies on common episodes and compare them.
    Compare(CompareArgs),
    /// Run a single episode and print statistics.
    Simulate(SimulateArgs),
    /// Repeat the run recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Built-in scenario name, `custom-mm1`, or a scenario file.
    #[arg(long, env = "PROCALLOC_SCENARIO", required_unless_present = "compose", conflicts_with = "compose")]
    scenario: Option<String>,

    /// Comma-separated stages chained in sequence.
    #[arg(long, value_delimiter = ',')]
    compose: Vec<String>,
}

impl ScenarioArgs {
    fn source(&self) -> String {
        match &self.scenario {
            Some(s) => s.clone(),
            None => format!("compose:{}", self.compose.join(",")),
        }
    }

    fn load(&self) -> Result<ProcessModel, CliError> {
        if let Some(s) = &self.scenario {
            return Ok(resolve_scenario_ref(s, None)?);
        }
        let stages = self
            .compose
            .iter()
            .map(|s| resolve_scenario_ref(s, None))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(compose(&stages)?)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RewardArg {
    A,
    B,
    C,
    D,
}

impl From<RewardArg> for RewardKind {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::A => RewardKind::PerCompletion,
            RewardArg::B => RewardKind::NegativeCycleTime,
            RewardArg::C => RewardKind::InverseCycleTime,
            RewardArg::D => RewardKind::DenseActiveCases,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adam,
    Momentum,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,

    /// TOML file with trainer settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Improvement iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Rollouts per candidate action (M).
    #[arg(long)]
    rollouts: Option<usize>,
    /// Decision steps per rollout (N).
    #[arg(long)]
    horizon: Option<usize>,
    /// States labeled per iteration.
    #[arg(long)]
    states: Option<usize>,
    /// Episodes of the keep-if-better evaluation.
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Cases per evaluation episode.
    #[arg(long)]
    eval_cases: Option<u64>,
    /// Rollout reward.
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    /// Bootstrap policy.
    #[arg(long, value_parser = parse_heuristic)]
    bootstrap: Option<Heuristic>,
    /// Keep the current policy's action unless the best one wins by this
    /// many standard errors (0 takes the plain argmax).
    #[arg(long)]
    label_confidence: Option<f64>,
    /// Hidden layer widths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Run rollouts on the uniformized chain with this kappa.
    #[arg(long)]
    uniformized: Option<f64>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Queue length bound of the state space.
    #[arg(long, default_value_t = 100)]
    bound: usize,
    /// Uniformization factor in (0, 1].
    #[arg(long, default_value_t = DEFAULT_KAPPA)]
    kappa: f64,
    /// Refuse models whose state space may exceed this size.
    #[arg(long, default_value_t = DEFAULT_MAX_STATES)]
    max_states: usize,
    /// Span tolerance, relative to the step length.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iterations: usize,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Comma-separated policies: spt, fifo, random, greedy, net:<path>,
    /// optimal:<path>; `label=<policy>` names a row.
    #[arg(long, value_delimiter = ',', required = true)]
    policies: Vec<String>,
    /// Row label of the reference policy.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long, default_value_t = 300)]
    episodes: usize,
    #[arg(long, default_value_t = 2500)]
    cases: u64,
    /// Draw independent episodes per policy instead of common ones.
    #[arg(long)]
    unpaired: bool,
    /// Evaluate on the uniformized chain with this kappa.
    #[arg(long)]
    uniformized: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value = "spt")]
    policy: String,
    #[arg(long, default_value_t = 2500)]
    cases: u64,
    /// Write every finished activity instance to `events.csv`.
    #[arg(long)]
    emit_log: bool,
    /// Simulate the uniformized chain with this kappa.
    #[arg(long)]
    uniformized: Option<f64>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Manifest written by an earlier run.
    manifest: PathBuf,
}

fn parse_heuristic(s: &str) -> Result<Heuristic, String> {
    s.parse()
}

fn dynamics(kappa: Option<f64>) -> Result<Dynamics, CliError> {
    match kappa {
        None => Ok(Dynamics::Ctmdp),
        Some(k) if k > 0.0 && k <= 1.0 => Ok(Dynamics::Uniformized { kappa: k }),
        Some(k) => Err(CliError::Config(format!("kappa must lie in (0, 1], got {k}"))),
    }
}

/// Makes file paths inside policy references absolute so a manifest can be
/// replayed from any directory.
fn absolute_policy_ref(reference: &str) -> String {
    let (label, spec) = match reference.split_once('=') {
        Some((l, s)) if !l.contains(':') => (Some(l), s),
        _ => (None, reference),
    };
    let spec = ["net:", "optimal:"]
        .iter()
        .find_map(|prefix| {
            spec.strip_prefix(prefix).map(|path| {
                let abs = std::fs::canonicalize(path).unwrap_or_else(|_| PathBuf::from(path));
                format!("{prefix}{}", abs.display())
            })
        })
        .unwrap_or_else(|| spec.to_string());
    match label {
        Some(l) => format!("{l}={spec}"),
        None => spec,
    }
}

fn train_config(args: &TrainArgs, seed: u64) -> Result<RolloutConfig, CliError> {
    let mut c = match &args.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RolloutConfig::default(),
    };
    c.seed = seed;
    if let Some(v) = args.iterations {
        c.iterations = v;
    }
    if let Some(v) = args.rollouts {
        c.rollouts = v;
    }
    if let Some(v) = args.horizon {
        c.horizon = v;
    }
    if let Some(v) = args.states {
        c.states = v;
    }
    if let Some(v) = args.eval_episodes {
        c.eval_episodes = v;
    }
    if let Some(v) = args.eval_cases {
        c.eval_cases = v;
    }
    if let Some(v) = args.reward {
        c.reward = v.into();
    }
    if let Some(v) = args.bootstrap {
        c.bootstrap = v;
    }
    if let Some(v) = args.label_confidence {
        c.label_confidence = v;
    }
    if let Some(v) = &args.hidden {
        c.hidden = v.clone();
    }
    if let Some(v) = args.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        c.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = args.optimizer {
        c.train.optimizer = match v {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Momentum => Optimizer::Momentum,
        };
    }
    if args.uniformized.is_some() {
        c.dynamics = dynamics(args.uniformized)?;
    }
    c.validate()?;
    Ok(c)
}

fn plan(cli: &Cli) -> Result<(Job, ProcessModel, String), CliError> {
    let seed = cli.seed;
    let (job, scenario) = match &cli.command {
        Command::Train(a) => (Job::Train(train_config(a, seed)?), &a.scenario),
        Command::Solve(a) => (
            Job::Solve(SolveJob {
                bound: a.bound,
                kappa: a.kappa,
                max_states: a.max_states,
                tolerance: a.tolerance,
                max_iterations: a.max_iterations,
                overflow_penalty: DEFAULT_OVERFLOW_PENALTY,
            }),
            &a.scenario,
        ),
        Command::Compare(a) => (
            Job::Compare(CompareJob {
                policies: a.policies.iter().map(|p| absolute_policy_ref(p)).collect(),
                reference: a.reference.clone(),
                eval: EvalConfig {
                    episodes: a.episodes,
                    cases: a.cases,
                    seed,
                    paired: !a.unpaired,
                    dynamics: dynamics(a.uniformized)?,
                },
            }),
            &a.scenario,
        ),
        Command::Simulate(a) => (
            Job::Simulate(SimulateJob {
                policy: absolute_policy_ref(&a.policy),
                cases: a.cases,
                seed,
                dynamics: dynamics(a.uniformized)?,
                emit_log: a.emit_log,
            }),
            &a.scenario,
        ),
        Command::Replay(_) => unreachable!("replay is planned from its manifest"),
    };
    Ok((job, scenario.load()?, scenario.source()))
}

fn set_workers(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(k) = workers {
        if k == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn execute(job: Job, model: &ProcessModel, source: String, out: &Path, workers: Option<usize>) -> Result<RunManifest, CliError> {
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    log::info!("running {} on `{}`", job.name(), model.name());
    let mut ctx = RunContext::new(model, out);
    commands::run(&job, &mut ctx)?;
    ctx.timings.insert("total".into(), clock.elapsed().as_secs_f64());
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: job.seed(),
        job,
        scenario: ScenarioRecord {
            source,
            fingerprint: model.fingerprint(),
            layout_hash: model.layout_hash(),
            model: model.to_decl(),
        },
        workers,
        inputs: ctx.inputs,
        outputs: ctx.outputs,
        started_at,
        timings: ctx.timings,
    };
    let path = manifest.write(out)?;
    log::info!("manifest written to {}", path.display());
    Ok(manifest)
}

fn replay(args: &ReplayArgs, out: &Path, workers: Option<usize>) -> Result<(), CliError> {
    let recorded = RunManifest::read(&args.manifest)?;
    recorded.verify_inputs()?;
    let model = ProcessModel::from_decl(&recorded.scenario.model)?;
    if model.fingerprint() != recorded.scenario.fingerprint {
        return Err(CliError::Config("embedded model does not match its recorded fingerprint".into()));
    }
    let fresh = execute(recorded.job.clone(), &model, recorded.scenario.source.clone(), out, workers)?;
    let mut differing = Vec::new();
    for old in recorded.outputs.iter().filter(|o| o.reproducible) {
        match fresh.outputs.iter().find(|n| n.path == old.path) {
            Some(new) if new.sha256 == old.sha256 => {}
            _ => differing.push(old.path.display().to_string()),
        }
    }
    if differing.is_empty() {
        println!("replay reproduced all recorded outputs");
        Ok(())
    } else {
        Err(CliError::Runtime(format!("replay outputs differ: {}", differing.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .init();
    let result = set_workers(cli.workers).and_then(|()| match &cli.command {
        Command::Replay(args) => replay(args, &cli.out, cli.workers),
        _ => plan(&cli).and_then(|(job, model, source)| execute(job, &model, source, &cli.out, cli.workers).map(|_| ())),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("procalloc: {e}");
            e.exit_code()
        }
    }
}
