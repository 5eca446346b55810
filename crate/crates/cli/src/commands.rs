//! Execution of resolved jobs. Every command writes its files into one
//! output directory and records their digests for the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use procalloc::eval::{self, run_episode_with, EvalReport};
use procalloc::mdp::{self, OptimalPolicy, SolverConfig};
use procalloc::policy::{save_policy, LearnedPolicy, Policy};
use procalloc::rollout::{self, TrainingReport};
use procalloc::{ProcessModel, RngStream};

use crate::error::CliError;
use crate::manifest::{digest_file, CompareJob, FileDigest, Job, SimulateJob, SolveJob};
use crate::policies::{self, HeuristicFile};

pub const POLICY_NET_FILE: &str = "policy.bin";
pub const POLICY_HEURISTIC_FILE: &str = "policy.json";

pub struct RunContext<'a> {
    pub model: &'a ProcessModel,
    pub out: &'a Path,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timings: BTreeMap<String, f64>,
}

impl<'a> RunContext<'a> {
    pub fn new(model: &'a ProcessModel, out: &'a Path) -> Self {
        RunContext {
            model,
            out,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>, reproducible: bool) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        self.record_output(name, reproducible)?;
        Ok(path)
    }

    fn record_output(&mut self, name: &str, reproducible: bool) -> Result<(), CliError> {
        let mut digest = digest_file(&self.out.join(name), reproducible)?;
        digest.path = PathBuf::from(name);
        self.outputs.push(digest);
        Ok(())
    }

    fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        let absolute = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        let digest = digest_file(&absolute, true)?;
        if !self.inputs.iter().any(|d| d.path == digest.path) {
            self.inputs.push(digest);
        }
        Ok(())
    }

    fn time(&mut self, phase: &str, started: Instant) {
        self.timings.insert(phase.to_string(), started.elapsed().as_secs_f64());
    }
}

pub fn run(job: &Job, ctx: &mut RunContext) -> Result<(), CliError> {
    fs::create_dir_all(ctx.out).map_err(|e| CliError::Runtime(format!("{}: {e}", ctx.out.display())))?;
    match job {
        Job::Train(config) => train(config, ctx),
        Job::Solve(job) => solve(job, ctx),
        Job::Compare(job) => compare(job, ctx),
        Job::Simulate(job) => simulate(job, ctx),
    }
}

fn training_csv(report: &TrainingReport) -> String {
    let mut out = String::from("iteration,labeled_states,train_loss,candidate_ct,incumbent_ct,accepted\n");
    for r in &report.iterations {
        let _ = writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9},{}",
            r.iteration, r.labeled_states, r.train_loss, r.candidate_ct, r.incumbent_ct, r.accepted
        );
    }
    out
}

fn train(config: &rollout::RolloutConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    config.validate()?;
    let started = Instant::now();
    let (policy, report) = rollout::train(ctx.model, config, |it, _| {
        eprintln!(
            "iteration {}/{}: candidate CT {:.4}, incumbent CT {:.4}, {} ({:.1}s)",
            it.iteration,
            config.iterations,
            it.candidate_ct,
            it.incumbent_ct,
            if it.accepted { "accepted" } else { "rejected" },
            it.wall_seconds
        );
    })?;
    ctx.time("train", started);
    let policy_file = match &policy {
        LearnedPolicy::Net(p) => {
            let path = ctx.out.join(POLICY_NET_FILE);
            save_policy(p.net(), ctx.model, &path).map_err(|e| CliError::Runtime(e.to_string()))?;
            ctx.record_output(POLICY_NET_FILE, true)?;
            path
        }
        LearnedPolicy::Bootstrap(h) => {
            let file = HeuristicFile {
                heuristic: *h,
                model_name: ctx.model.name().to_string(),
                layout_hash: ctx.model.layout_hash(),
            };
            let json = serde_json::to_string_pretty(&file).expect("serializes") + "\n";
            ctx.write(POLICY_HEURISTIC_FILE, json, true)?
        }
    };
    ctx.write("training.csv", training_csv(&report), true)?;
    let text = report.to_text();
    ctx.write("report.txt", &text, false)?;
    print!("{text}");
    println!("policy written to {}", policy_file.display());
    Ok(())
}

fn solve(job: &SolveJob, ctx: &mut RunContext) -> Result<(), CliError> {
    let config = SolverConfig {
        bound: job.bound,
        kappa: job.kappa,
        max_states: job.max_states,
        overflow_penalty: job.overflow_penalty,
        tolerance: job.tolerance,
        max_iterations: job.max_iterations,
    };
    let started = Instant::now();
    let (mdp, solution) = mdp::solve(ctx.model, &config)?;
    ctx.time("solve", started);
    let optimal = OptimalPolicy::new(&mdp, &solution);
    let path = ctx.out.join("solution.json");
    optimal.save(&path)?;
    ctx.record_output("solution.json", true)?;
    let mut text = String::new();
    let _ = writeln!(text, "model {}", ctx.model.name());
    let _ = writeln!(text, "states {}", mdp.num_states());
    let _ = writeln!(text, "state-action pairs {}", mdp.num_pairs());
    let _ = writeln!(text, "queue bound {}", mdp.bound);
    let _ = writeln!(text, "kappa {}", mdp.kappa);
    let _ = writeln!(text, "tau {:.9}", mdp.tau);
    let _ = writeln!(text, "iterations {}", solution.iterations);
    let _ = writeln!(text, "final span {:.3e}", solution.span_history.last().copied().unwrap_or(0.0));
    let _ = writeln!(text, "gain {:.9}", solution.gain);
    let _ = writeln!(text, "mean cycle time {:.6}", solution.mean_cycle_time());
    ctx.write("summary.txt", &text, true)?;
    print!("{text}");
    println!("solution written to {}", path.display());
    Ok(())
}

fn compare(job: &CompareJob, ctx: &mut RunContext) -> Result<(), CliError> {
    let resolved = policies::resolve_all(&job.policies, ctx.model)?;
    for p in &resolved {
        if let Some(file) = &p.file {
            ctx.record_input(file)?;
        }
    }
    let reference = match &job.reference {
        Some(label) => resolved
            .iter()
            .find(|p| &p.label == label)
            .ok_or_else(|| CliError::Config(format!("reference `{label}` is not among the policies")))?,
        None => resolved
            .iter()
            .find(|p| p.optimal)
            .or(resolved.first())
            .ok_or_else(|| CliError::Config("no policies to compare".into()))?,
    };
    let optimal_reference = reference.optimal;
    let reference = reference.label.clone();
    let list: Vec<(String, &dyn Policy)> = resolved.iter().map(|p| (p.label.clone(), p.policy.as_ref())).collect();
    let started = Instant::now();
    let report: EvalReport = EvalReport {
        optimal_reference,
        ..eval::compare(ctx.model, &list, &reference, &job.eval)?
    };
    ctx.time("evaluate", started);
    ctx.write("compare.csv", report.to_csv(), true)?;
    ctx.write("episodes.csv", report.episodes_csv(), true)?;
    let text = report.to_text();
    ctx.write("compare.txt", &text, true)?;
    print!("{text}");
    Ok(())
}

fn simulate(job: &SimulateJob, ctx: &mut RunContext) -> Result<(), CliError> {
    let resolved = policies::resolve(&job.policy, ctx.model)?;
    if let Some(file) = &resolved.file {
        ctx.record_input(file)?;
    }
    let model = ctx.model;
    let rng = RngStream::new(job.seed).derive("episode", 0);
    let mut log = String::from("case,activity,resource,start,end\n");
    let mut clock = 0.0;
    let started = Instant::now();
    let result = run_episode_with(model, resolved.policy.as_ref(), job.cases, &rng, job.dynamics, |out| {
        clock += out.dt;
        if let (true, Some(r)) = (job.emit_log, &out.finished) {
            let _ = writeln!(
                log,
                "{},{},{},{},{}",
                r.case,
                model.activities()[r.activity],
                model.resources()[r.resource],
                r.start,
                r.end
            );
        }
    })?;
    ctx.time("simulate", started);
    if job.emit_log {
        ctx.write("events.csv", &log, true)?;
    }
    let max_ct = result.cycle_times.iter().copied().fold(0.0, f64::max);
    let mut text = String::new();
    let _ = writeln!(text, "model {}", model.name());
    let _ = writeln!(text, "policy {}", resolved.label);
    let _ = writeln!(text, "cases {}", result.cycle_times.len());
    let _ = writeln!(text, "decision steps {}", result.steps);
    let _ = writeln!(text, "simulated time {clock:.6}");
    let _ = writeln!(text, "mean cycle time {:.6}", result.mean_cycle_time());
    let _ = writeln!(text, "max cycle time {max_ct:.6}");
    let _ = writeln!(text, "dense return {:.6}", result.dense_return);
    let _ = writeln!(text, "substituted postpones {}", result.forced);
    ctx.write("summary.txt", &text, true)?;
    print!("{text}");
    Ok(())
}
