//! Evaluation protocol: finite episodes from an empty process, per-episode
//! mean cycle times, confidence intervals, t-tests against a reference and
//! optimality gaps.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ProcessModel;
use crate::policy::{Heuristic, LearnedPolicy, Policy};
use crate::reward;
use crate::rng::RngStream;
use crate::rollout::{self, RolloutConfig, RolloutError};
use crate::sim::{ExecutionState, SimError, StepOutcome};
use crate::stats;

/// Decision steps after which an episode is declared non-terminating.
pub const MAX_EPISODE_STEPS: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("episode did not terminate within {0} decision steps")]
    NonTerminating(u64),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("reference policy `{0}` is not among the compared policies")]
    UnknownReference(String),
    #[error("need at least {min} {what}, got {got}")]
    TooFew { what: &'static str, min: u64, got: u64 },
    #[error("episode counts differ: {0} vs {1}")]
    EpisodeMismatch(usize, usize),
    #[error(transparent)]
    Training(#[from] Box<RolloutError>),
}

/// Which process the episodes run on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Dynamics {
    /// Event-driven continuous-time simulation.
    Ctmdp,
    /// Uniformized chain with step `kappa / max_total_rate`.
    Uniformized { kappa: f64 },
}

impl Dynamics {
    pub fn tau(self, model: &ProcessModel) -> Option<f64> {
        match self {
            Dynamics::Ctmdp => None,
            Dynamics::Uniformized { kappa } => Some(kappa / model.max_total_rate()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub cases: u64,
    pub seed: u64,
    /// Same episode seeds for every policy; comparisons then also report a
    /// paired t-test.
    pub paired: bool,
    pub dynamics: Dynamics,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 300,
            cases: 2500,
            seed: 0,
            paired: true,
            dynamics: Dynamics::Ctmdp,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub cycle_times: Vec<f64>,
    /// Undiscounted sum of dense rewards.
    pub dense_return: f64,
    pub steps: u64,
    /// Decisions where the policy postponed although nothing was pending;
    /// they are replaced by the SPT choice.
    pub forced: u64,
}

impl EpisodeResult {
    pub fn mean_cycle_time(&self) -> f64 {
        stats::mean(&self.cycle_times)
    }
}

/// Runs one episode: `n_cases` arrivals, then until the process is empty.
pub fn run_episode(
    model: &ProcessModel,
    policy: &dyn Policy,
    n_cases: u64,
    rng: &RngStream,
    dynamics: Dynamics,
) -> Result<EpisodeResult, EvalError> {
    run_episode_with(model, policy, n_cases, rng, dynamics, |_| {})
}

/// [`run_episode`] that also hands every step outcome to `on_step`.
pub fn run_episode_with(
    model: &ProcessModel,
    policy: &dyn Policy,
    n_cases: u64,
    rng: &RngStream,
    dynamics: Dynamics,
    mut on_step: impl FnMut(&StepOutcome),
) -> Result<EpisodeResult, EvalError> {
    if n_cases == 0 {
        return Err(EvalError::TooFew {
            what: "cases",
            min: 1,
            got: 0,
        });
    }
    let mut state = ExecutionState::with_arrival_limit(model, rng, n_cases);
    let mut policy_rng = rng.derive("policy", 0);
    let tau = dynamics.tau(model);
    let mut result = EpisodeResult {
        cycle_times: Vec::with_capacity(n_cases as usize),
        dense_return: 0.0,
        steps: 0,
        forced: 0,
    };
    while !state.is_terminal() {
        if result.steps >= MAX_EPISODE_STEPS {
            return Err(EvalError::NonTerminating(MAX_EPISODE_STEPS));
        }
        let mask = state.feasible_actions(model);
        let mut action = policy.choose(&state, model, &mask, &mut policy_rng);
        if action == model.postpone_index() && !mask.forced_postpone() && state.is_idle() && state.next_arrival().is_none() {
            action = Heuristic::Spt.choose(&state, model, &mask, &mut policy_rng);
            result.forced += 1;
        }
        let out = match tau {
            None => state.step(model, action)?,
            Some(tau) => state.step_uniformized(model, action, tau)?,
        };
        on_step(&out);
        result.dense_return += reward::dense(&out);
        result.cycle_times.extend(out.completions.iter().map(|c| c.cycle_time));
        result.steps += 1;
    }
    Ok(result)
}

fn episode_rng(config: &EvalConfig, policy_slot: u64, episode: usize) -> RngStream {
    let root = RngStream::new(config.seed);
    let root = if config.paired {
        root
    } else {
        root.derive("policy-slot", policy_slot)
    };
    root.derive("episode", episode as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub name: String,
    pub episode_means: Vec<f64>,
    pub mean: f64,
    pub half_width: f64,
    pub cases: u64,
    pub forced: u64,
}

fn evaluate_slot(model: &ProcessModel, name: &str, policy: &dyn Policy, config: &EvalConfig, slot: u64) -> Result<PolicyEval, EvalError> {
    if config.episodes < 2 {
        return Err(EvalError::TooFew {
            what: "episodes",
            min: 2,
            got: config.episodes as u64,
        });
    }
    let results: Vec<EpisodeResult> = (0..config.episodes)
        .into_par_iter()
        .map(|e| run_episode(model, policy, config.cases, &episode_rng(config, slot, e), config.dynamics))
        .collect::<Result<_, _>>()?;
    let episode_means: Vec<f64> = results.iter().map(EpisodeResult::mean_cycle_time).collect();
    Ok(PolicyEval {
        name: name.to_string(),
        mean: stats::mean(&episode_means),
        half_width: stats::t_half_width(&episode_means, 0.95),
        episode_means,
        cases: config.cases,
        forced: results.iter().map(|r| r.forced).sum(),
    })
}

/// Mean of per-episode mean cycle times with a 95% Student-t interval.
pub fn evaluate(model: &ProcessModel, policy: &dyn Policy, config: &EvalConfig) -> Result<PolicyEval, EvalError> {
    evaluate_slot(model, &policy.name(), policy, config, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub eval: PolicyEval,
    /// `(CT - CT_ref) / CT_ref * 100`
    pub gap_pct: f64,
    pub p_welch: f64,
    pub p_paired: Option<f64>,
    /// Different from the reference at the 5% level (paired test when the
    /// design is paired, Welch otherwise).
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub reference: String,
    /// Whether the reference is an optimal policy, i.e. whether the gaps are
    /// optimality gaps. Otherwise the CSV marks the gap column `n/a`.
    #[serde(default)]
    pub optimal_reference: bool,
    pub config: EvalConfig,
    pub rows: Vec<ReportRow>,
}

pub const SIGNIFICANCE: f64 = 0.05;

/// Evaluates every policy and compares it with the one named `reference`.
pub fn compare(
    model: &ProcessModel,
    policies: &[(String, &dyn Policy)],
    reference: &str,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let ref_index = policies
        .iter()
        .position(|(n, _)| n == reference)
        .ok_or_else(|| EvalError::UnknownReference(reference.to_string()))?;
    let evals: Vec<PolicyEval> = policies
        .iter()
        .enumerate()
        .map(|(i, (name, p))| evaluate_slot(model, name, *p, config, i as u64))
        .collect::<Result<_, _>>()?;
    let rows = evals
        .iter()
        .map(|e| compare_to(e, &evals[ref_index], config.paired).map(|row| ReportRow { eval: e.clone(), ..row }))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        scenario: model.name().to_string(),
        reference: reference.to_string(),
        optimal_reference: false,
        config: config.clone(),
        rows,
    })
}

/// Gap and tests of `policy` against `reference`.
pub fn compare_to(policy: &PolicyEval, reference: &PolicyEval, paired: bool) -> Result<ReportRow, EvalError> {
    let a = &policy.episode_means;
    let b = &reference.episode_means;
    if paired && a.len() != b.len() {
        return Err(EvalError::EpisodeMismatch(a.len(), b.len()));
    }
    let p_welch = stats::welch_t_test(a, b).p_value;
    let p_paired = paired.then(|| stats::paired_t_test(a, b).p_value);
    Ok(ReportRow {
        eval: policy.clone(),
        gap_pct: (policy.mean - reference.mean) / reference.mean * 100.0,
        p_welch,
        p_paired,
        significant: p_paired.unwrap_or(p_welch) < SIGNIFICANCE,
    })
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.eval.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,policy,episodes,cases,mean_ct,ci95_half_width,vs_reference_pct,gap_pct,p_welch,p_paired,significant\n",
        );
        for r in &self.rows {
            let gap = if self.optimal_reference {
                format!("{:.4}", r.gap_pct)
            } else {
                "n/a".to_string()
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.4},{gap},{:.6},{},{}",
                self.scenario,
                r.eval.name,
                r.eval.episode_means.len(),
                r.eval.cases,
                r.eval.mean,
                r.eval.half_width,
                r.gap_pct,
                r.p_welch,
                r.p_paired.map_or(String::new(), |p| format!("{p:.6}")),
                r.significant
            );
        }
        out
    }

    /// Per-episode means, one row per (policy, episode).
    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("scenario,policy,episode,mean_ct\n");
        for r in &self.rows {
            for (e, m) in r.eval.episode_means.iter().enumerate() {
                let _ = writeln!(out, "{},{},{e},{m:.9}", self.scenario, r.eval.name);
            }
        }
        out
    }

    /// Plain-text table: mean cycle time of the reference, then per policy
    /// its gap in percent; non-significant gaps are marked with `*`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let reference = self.row(&self.reference).expect("reference row");
        let _ = writeln!(
            out,
            "scenario {}: {} episodes x {} cases, {} design, reference `{}` mean cycle time {:.3} (+-{:.3})",
            self.scenario,
            self.config.episodes,
            self.config.cases,
            if self.config.paired { "paired" } else { "unpaired" },
            self.reference,
            reference.eval.mean,
            reference.eval.half_width
        );
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>9} {:>9} {:>10} {:>10}",
            "policy",
            "mean CT",
            "+-95%",
            if self.optimal_reference { "gap %" } else { "vs ref %" },
            "p welch",
            "p paired"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>10.3} {:>9.3} {:>8.2}{} {:>10.4} {:>10}",
                r.eval.name,
                r.eval.mean,
                r.eval.half_width,
                r.gap_pct,
                if r.significant { " " } else { "*" },
                r.p_welch,
                r.p_paired.map_or("-".to_string(), |p| format!("{p:.4}"))
            );
        }
        let _ = writeln!(out, "* not significantly different from the reference (alpha = {SIGNIFICANCE})");
        out
    }
}

/// First training iteration whose accepted policy is not significantly worse
/// than the best heuristic; `None` when that never happens within the
/// configured iterations. A model without any allocation choice matches at 0.
pub fn iterations_to_match(
    model: &ProcessModel,
    trainer: &RolloutConfig,
    heuristics: &[Heuristic],
    eval: &EvalConfig,
) -> Result<Option<usize>, EvalError> {
    let mut best: Option<PolicyEval> = None;
    for h in heuristics {
        let e = evaluate(model, h, eval)?;
        if best.as_ref().is_none_or(|b| e.mean < b.mean) {
            best = Some(e);
        }
    }
    let best = best.ok_or(EvalError::TooFew {
        what: "heuristics",
        min: 1,
        got: 0,
    })?;
    let matches = |candidate: &PolicyEval| -> Result<bool, EvalError> {
        let row = compare_to(candidate, &best, eval.paired)?;
        Ok(candidate.mean <= best.mean || !row.significant)
    };
    if model.allowed_assignments().len() <= 1 {
        let bootstrap = evaluate(model, &LearnedPolicy::Bootstrap(trainer.bootstrap), eval)?;
        if matches(&bootstrap)? {
            return Ok(Some(0));
        }
    }
    let mut found = None;
    let mut failure = None;
    rollout::train_until(model, trainer, |report, policy| {
        if !report.accepted {
            return ControlFlow::Continue(());
        }
        match evaluate(model, policy, eval).and_then(|e| matches(&e)) {
            Ok(true) => found = Some(report.iteration),
            Ok(false) => return ControlFlow::Continue(()),
            Err(e) => failure = Some(e),
        }
        ControlFlow::Break(())
    })
    .map_err(Box::new)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(found),
    }
}
