//! Rollout-based policy improvement.
//!
//! Each iteration samples decision states under the current policy, labels
//! every state with the action whose Monte-Carlo rollouts return the most,
//! fits a network to the labels and keeps it only if it lowers the mean
//! cycle time on a fixed evaluation set.

use std::ops::ControlFlow;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, Dynamics, EvalConfig, EvalError};
use crate::model::ProcessModel;
use crate::policy::{Heuristic, LearnedPolicy, NetError, NetPolicy, Policy, PolicyNet, TrainConfig, TrainingSample};
use crate::reward::{self, RewardKind, Transition};
use crate::rng::RngStream;
use crate::sim::{sample_states, ExecutionState, SampleConfig, SimError};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid rollout configuration: {0}")]
    Config(String),
    #[error("action {0} is not feasible at the rollout root")]
    InfeasibleAction(usize),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("training failed: {0}")]
    Net(#[from] NetError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub iterations: usize,
    /// Replications per candidate action (M).
    pub rollouts: usize,
    /// Decision steps per rollout, the first action included (N).
    pub horizon: usize,
    /// Root states labeled per iteration.
    pub states: usize,
    /// Episodes and cases of the keep-if-better evaluation.
    pub eval_episodes: usize,
    pub eval_cases: u64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub reward: RewardKind,
    pub bootstrap: Heuristic,
    /// When positive, a state keeps the current policy's action as its label
    /// unless the best action beats it by this many standard errors of the
    /// paired replication differences. Zero labels with the plain argmax.
    pub label_confidence: f64,
    /// Process the rollouts run on. With the uniformized chain the horizon
    /// becomes `ceil(horizon / kappa)` uniform steps.
    pub dynamics: Dynamics,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            iterations: 10,
            rollouts: 100,
            horizon: 100,
            states: 5000,
            eval_episodes: 30,
            eval_cases: 2500,
            seed: 0,
            hidden: vec![128, 128],
            reward: RewardKind::DenseActiveCases,
            bootstrap: Heuristic::Greedy,
            label_confidence: 0.0,
            dynamics: Dynamics::Ctmdp,
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        let counts = [
            ("rollouts", self.rollouts as u64),
            ("horizon", self.horizon as u64),
            ("states", self.states as u64),
            ("eval_cases", self.eval_cases),
            ("train.epochs", self.train.epochs as u64),
            ("train.batch_size", self.train.batch_size as u64),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(RolloutError::Config(format!("{name} must be at least 1")));
        }
        if self.eval_episodes < 2 {
            return Err(RolloutError::Config("eval_episodes must be at least 2".into()));
        }
        if !self.label_confidence.is_finite() || self.label_confidence < 0.0 {
            return Err(RolloutError::Config(format!(
                "label_confidence must be finite and non-negative, got {}",
                self.label_confidence
            )));
        }
        if self.hidden.contains(&0) {
            return Err(RolloutError::Config("hidden layer widths must be positive".into()));
        }
        if let Dynamics::Uniformized { kappa } = self.dynamics {
            if !(kappa > 0.0 && kappa <= 1.0) {
                return Err(RolloutError::Config(format!("kappa must lie in (0, 1], got {kappa}")));
            }
        }
        Ok(())
    }

    fn horizon_steps(&self) -> usize {
        match self.dynamics {
            Dynamics::Ctmdp => self.horizon,
            Dynamics::Uniformized { kappa } => (self.horizon as f64 / kappa).ceil() as usize,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.eval_episodes,
            cases: self.eval_cases,
            seed: RngStream::new(self.seed).derive("gate", 0).next_u64(),
            paired: true,
            dynamics: Dynamics::Ctmdp,
        }
    }
}

/// Rollout settings shared by the estimates of one root.
#[derive(Clone, Copy, Debug)]
pub struct RolloutSpec {
    pub steps: usize,
    pub reward: RewardKind,
    pub dynamics: Dynamics,
}

impl From<&RolloutConfig> for RolloutSpec {
    fn from(c: &RolloutConfig) -> Self {
        RolloutSpec {
            steps: c.horizon_steps(),
            reward: c.reward,
            dynamics: c.dynamics,
        }
    }
}

/// Random streams for the replications of one root; replication `j` uses
/// the same stream for every candidate action.
pub fn crn_streams(base: &RngStream, count: usize) -> Vec<RngStream> {
    (0..count as u64).map(|j| base.derive("replication", j)).collect()
}

/// Mean return over the replications: restore the root, redraw its pending
/// event times from the replication's stream, take `first_action`, then
/// follow `policy` for the remaining `steps - 1` decisions.
pub fn estimate_return(
    root: &ExecutionState,
    first_action: usize,
    policy: &dyn Policy,
    model: &ProcessModel,
    spec: RolloutSpec,
    crn: &[RngStream],
) -> Result<f64, RolloutError> {
    let returns = replication_returns(root, first_action, policy, model, spec, crn)?;
    Ok(returns.iter().sum::<f64>() / returns.len() as f64)
}

/// Return of every replication, in stream order.
pub fn replication_returns(
    root: &ExecutionState,
    first_action: usize,
    policy: &dyn Policy,
    model: &ProcessModel,
    spec: RolloutSpec,
    crn: &[RngStream],
) -> Result<Vec<f64>, RolloutError> {
    if !root.feasible_actions(model).is_feasible(first_action) {
        return Err(RolloutError::InfeasibleAction(first_action));
    }
    let tau = spec.dynamics.tau(model);
    let mut returns = Vec::with_capacity(crn.len());
    for stream in crn {
        let mut state = ExecutionState::restore(root);
        state.reseed(model, stream);
        let mut policy_rng = stream.derive("policy", 0);
        let mut ret = 0.0;
        for step in 0..spec.steps {
            let action = if step == 0 {
                first_action
            } else {
                let mask = state.feasible_actions(model);
                policy.choose(&state, model, &mask, &mut policy_rng)
            };
            let out = match tau {
                None => state.step(model, action)?,
                Some(tau) => state.step_uniformized(model, action, tau)?,
            };
            ret += match spec.reward {
                RewardKind::DenseActiveCases => reward::dense(&out),
                kind => {
                    let t = Transition::from(&out);
                    reward::step_reward(kind, t.active_cases, t.dt, &t.cycle_times).expect("valid transition")
                }
            };
            state.take_completed();
        }
        returns.push(ret);
    }
    Ok(returns)
}

/// Label of a root under the confidence rule: the best action by mean
/// return, unless its paired advantage over the policy's own action is below
/// `z` standard errors.
pub fn confident_action(
    root: &ExecutionState,
    policy: &dyn Policy,
    model: &ProcessModel,
    spec: RolloutSpec,
    crn: &[RngStream],
    z: f64,
    rng: &mut RngStream,
) -> Result<usize, RolloutError> {
    let mask = root.feasible_actions(model);
    let incumbent = policy.choose(root, model, &mask, rng);
    let returns: Vec<(usize, Vec<f64>)> = mask
        .indices()
        .map(|a| replication_returns(root, a, policy, model, spec, crn).map(|r| (a, r)))
        .collect::<Result<_, _>>()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut best = &returns[0];
    for r in &returns[1..] {
        if mean(&r.1) > mean(&best.1) {
            best = r;
        }
    }
    if best.0 == incumbent || crn.len() < 2 {
        return Ok(best.0);
    }
    let own = &returns.iter().find(|r| r.0 == incumbent).expect("policy picks a feasible action").1;
    let diffs: Vec<f64> = best.1.iter().zip(own).map(|(b, o)| b - o).collect();
    let d = mean(&diffs);
    let var = diffs.iter().map(|x| (x - d).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    let se = (var / diffs.len() as f64).sqrt();
    Ok(if d > z * se { best.0 } else { incumbent })
}

/// Estimates every feasible action and returns the best one (lowest index
/// among equal estimates) with all estimates.
pub fn best_action(
    root: &ExecutionState,
    policy: &dyn Policy,
    model: &ProcessModel,
    spec: RolloutSpec,
    crn: &[RngStream],
) -> Result<(usize, Vec<(usize, f64)>), RolloutError> {
    let estimates: Vec<(usize, f64)> = root
        .feasible_actions(model)
        .indices()
        .map(|a| estimate_return(root, a, policy, model, spec, crn).map(|g| (a, g)))
        .collect::<Result<_, _>>()?;
    let mut best = estimates[0];
    for &(a, g) in &estimates[1..] {
        if g > best.1 {
            best = (a, g);
        }
    }
    Ok((best.0, estimates))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub labeled_states: usize,
    pub train_loss: f64,
    pub candidate_ct: f64,
    pub incumbent_ct: f64,
    pub accepted: bool,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub model: String,
    pub bootstrap_ct: f64,
    pub final_ct: f64,
    pub accepted: usize,
    pub iterations: Vec<IterationReport>,
}

impl TrainingReport {
    pub fn improved(&self) -> bool {
        self.accepted > 0
    }

    /// Structured text: one header line, then one line per iteration.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "model {}: bootstrap mean CT {:.4}, final mean CT {:.4}, {} of {} iterations accepted\n",
            self.model,
            self.bootstrap_ct,
            self.final_ct,
            self.accepted,
            self.iterations.len()
        );
        out.push_str("iteration,labeled_states,train_loss,candidate_ct,incumbent_ct,accepted,wall_seconds\n");
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{:.2}\n",
                r.iteration, r.labeled_states, r.train_loss, r.candidate_ct, r.incumbent_ct, r.accepted, r.wall_seconds
            ));
        }
        out
    }
}

/// Labels `roots` by rollouts under `policy`.
pub fn label_states(
    model: &ProcessModel,
    policy: &dyn Policy,
    roots: &[ExecutionState],
    config: &RolloutConfig,
    base: &RngStream,
) -> Result<Vec<TrainingSample>, RolloutError> {
    let spec = RolloutSpec::from(config);
    let labeled: Vec<Option<TrainingSample>> = roots
        .par_iter()
        .enumerate()
        .map(|(i, root)| {
            let mask = root.feasible_actions(model);
            if mask.count() < 2 {
                return Ok(None);
            }
            let stream = base.derive("root", i as u64);
            let crn = crn_streams(&stream, config.rollouts);
            let label = if config.label_confidence > 0.0 {
                let mut rng = stream.derive("incumbent", 0);
                confident_action(root, policy, model, spec, &crn, config.label_confidence, &mut rng)?
            } else {
                best_action(root, policy, model, spec, &crn)?.0
            };
            Ok(Some(TrainingSample {
                observation: root.observe(model).0,
                mask: mask.as_slice().to_vec(),
                label,
            }))
        })
        .collect::<Result<_, RolloutError>>()?;
    Ok(labeled.into_iter().flatten().collect())
}

/// Runs the improvement loop. `on_iteration` sees every iteration's report
/// and the policy in force after it.
pub fn train(
    model: &ProcessModel,
    config: &RolloutConfig,
    mut on_iteration: impl FnMut(&IterationReport, &LearnedPolicy),
) -> Result<(LearnedPolicy, TrainingReport), RolloutError> {
    train_until(model, config, |it, policy| {
        on_iteration(it, policy);
        ControlFlow::Continue(())
    })
}

/// Like [`train`], but stops after the first iteration whose callback
/// returns `Break`.
pub fn train_until(
    model: &ProcessModel,
    config: &RolloutConfig,
    mut on_iteration: impl FnMut(&IterationReport, &LearnedPolicy) -> ControlFlow<()>,
) -> Result<(LearnedPolicy, TrainingReport), RolloutError> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let gate = config.eval_config();
    let mut policy = LearnedPolicy::Bootstrap(config.bootstrap);
    let bootstrap_ct = eval::evaluate(model, &policy, &gate)?.mean;
    let mut incumbent_ct = bootstrap_ct;
    let mut report = TrainingReport {
        model: model.name().to_string(),
        bootstrap_ct,
        final_ct: bootstrap_ct,
        accepted: 0,
        iterations: Vec::new(),
    };
    for iteration in 1..=config.iterations {
        let started = Instant::now();
        let it_rng = root.derive("iteration", iteration as u64);
        let roots = sample_states(model, &policy, config.states, &it_rng.derive("sample", 0), &config.sample)?;
        let data = label_states(model, &policy, &roots, config, &it_rng.derive("rollouts", 0))?;
        log::info!("iteration {iteration}: {} labeled states", data.len());
        let mut candidate_ct = incumbent_ct;
        let mut train_loss = f64::NAN;
        let mut accepted = false;
        if !data.is_empty() {
            let start_net = match &policy {
                LearnedPolicy::Net(p) => p.net().clone(),
                LearnedPolicy::Bootstrap(_) => PolicyNet::new(model, &config.hidden, &mut root.derive("init", 0)),
            };
            let net = start_net.train(&data, &config.train, &mut it_rng.derive("train", 0))?;
            train_loss = net.mean_loss(&data);
            let candidate = LearnedPolicy::Net(NetPolicy::new(net));
            candidate_ct = eval::evaluate(model, &candidate, &gate)?.mean;
            if candidate_ct < incumbent_ct {
                accepted = true;
                incumbent_ct = candidate_ct;
                policy = candidate;
                report.accepted += 1;
            }
        }
        let it = IterationReport {
            iteration,
            labeled_states: data.len(),
            train_loss,
            candidate_ct,
            incumbent_ct,
            accepted,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "iteration {iteration}: candidate {candidate_ct:.4}, incumbent {incumbent_ct:.4}, {}",
            if accepted { "accepted" } else { "rejected" }
        );
        let flow = on_iteration(&it, &policy);
        report.iterations.push(it);
        if flow.is_break() {
            break;
        }
    }
    report.final_ct = incumbent_ct;
    if config.iterations > 0 && !report.improved() {
        log::warn!("no iteration improved on the bootstrap policy");
    }
    Ok((policy, report))
}
