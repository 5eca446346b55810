//! Exact solution of bounded instances.
//!
//! The abstract state carries the information of the observation: queue
//! length per activity (capped at a bound) and, per resource, the activity it
//! serves. The continuous-time chain on these states is uniformized with step
//! `tau = kappa / max_total_rate` and solved for the average reward by
//! relative value iteration.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ProcessModel, Routing};
use crate::policy::{Heuristic, Policy};
use crate::rng::RngStream;
use crate::sim::{ActionMask, ExecutionState, QUEUE_CAP};

pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_MAX_STATES: usize = 5_000_000;
pub const DEFAULT_OVERFLOW_PENALTY: f64 = 1e6;
pub const SOLUTION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("kappa must lie in (0, 1], got {0}")]
    Kappa(f64),
    #[error("state space has up to {estimate:.3e} states, above the limit of {limit}")]
    TooManyStates { estimate: f64, limit: usize },
    #[error("the solver does not support this routing: {0}")]
    Unsupported(String),
    #[error("value iteration did not converge in {iterations} iterations (last span {last_span})")]
    NotConverged { iterations: usize, last_span: f64 },
    #[error("solution file: {0}")]
    File(String),
    #[error("solution was computed for layout {found}, model has {expected}")]
    LayoutMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub bound: usize,
    pub kappa: f64,
    pub max_states: usize,
    pub overflow_penalty: f64,
    /// Span tolerance as a multiple of `tau`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            bound: QUEUE_CAP,
            kappa: DEFAULT_KAPPA,
            max_states: DEFAULT_MAX_STATES,
            overflow_penalty: DEFAULT_OVERFLOW_PENALTY,
            tolerance: 1e-6,
            max_iterations: 1_000_000,
        }
    }
}

/// How the number of active cases is recovered from an abstract state.
#[derive(Clone, Copy, Debug, PartialEq)]
enum CaseCount {
    /// Every instance belongs to a different case.
    Sum,
    /// All activities are parallel branches of one case: the largest branch
    /// count is used (exact when branches progress in lockstep).
    MaxBranch,
}

fn case_count_rule(model: &ProcessModel) -> Result<CaseCount, MdpError> {
    let n = model.num_activities();
    let routings: Vec<&Routing> = (0..n).map(|a| model.routing(a)).collect();
    if model.initial_activities().len() == 1 && routings.iter().all(|r| matches!(r, Routing::Complete | Routing::Successor(_))) {
        return Ok(CaseCount::Sum);
    }
    let all_initial = model.initial_activities().len() == n;
    let all_final_joins = routings.iter().all(|r| matches!(r, Routing::Join { then } if then.is_empty()));
    if all_initial && all_final_joins {
        return Ok(CaseCount::MaxBranch);
    }
    Err(MdpError::Unsupported(
        "only sequential chains and a single parallel block are supported".into(),
    ))
}

/// Abstract state: `num_activities` queue lengths followed by one code per
/// resource (0 idle, `1 + activity` busy). Same encoding as
/// [`ExecutionState::observation_key`].
pub type StateKey = Vec<u16>;

struct Dynamics<'a> {
    model: &'a ProcessModel,
    bound: u16,
    count: CaseCount,
}

/// One (state, action) pair before uniformization.
struct Outcomes {
    active_cases: usize,
    /// `(rate, next state, overflowed)`
    events: Vec<(f64, StateKey, bool)>,
}

impl Dynamics<'_> {
    fn num_activities(&self) -> usize {
        self.model.num_activities()
    }

    fn feasible(&self, s: &[u16]) -> Vec<usize> {
        let na = self.num_activities();
        let mut out: Vec<usize> = self
            .model
            .allowed_assignments()
            .iter()
            .enumerate()
            .filter(|(_, &(r, a))| s[na + r] == 0 && s[a] > 0)
            .map(|(i, _)| i)
            .collect();
        out.push(self.model.postpone_index());
        out
    }

    fn active_cases(&self, s: &[u16]) -> usize {
        let na = self.num_activities();
        let mut per_activity: Vec<usize> = s[..na].iter().map(|&q| q as usize).collect();
        for &code in &s[na..] {
            if code > 0 {
                per_activity[code as usize - 1] += 1;
            }
        }
        match self.count {
            CaseCount::Sum => per_activity.iter().sum(),
            CaseCount::MaxBranch => per_activity.into_iter().max().unwrap_or(0),
        }
    }

    /// Adds one instance to each of `targets`; `false` if a queue would
    /// exceed the bound (the queues are then left unchanged).
    fn enqueue(&self, s: &mut [u16], targets: &[usize]) -> bool {
        if targets.iter().any(|&a| s[a] >= self.bound) {
            return false;
        }
        for &a in targets {
            s[a] += 1;
        }
        true
    }

    fn post_decision(&self, s: &[u16], action: usize) -> StateKey {
        let na = self.num_activities();
        let mut post = s.to_vec();
        if let Some(&(r, a)) = self.model.allowed_assignments().get(action) {
            post[a] -= 1;
            post[na + r] = a as u16 + 1;
        }
        post
    }

    fn outcomes(&self, s: &[u16], action: usize) -> Outcomes {
        let na = self.num_activities();
        let post = self.post_decision(s, action);
        let mut events = Vec::new();
        let mut next = post.clone();
        let ok = self.enqueue(&mut next, self.model.initial_activities());
        events.push((self.model.arrival_rate(), if ok { next } else { post.clone() }, !ok));
        for r in 0..self.model.num_resources() {
            let code = post[na + r];
            if code == 0 {
                continue;
            }
            let a = code as usize - 1;
            let rate = self.model.rate(r, a).expect("eligible");
            let mut next = post.clone();
            next[na + r] = 0;
            // on overflow the resource is still released; the routed instance is dropped
            let ok = self.enqueue(&mut next, self.model.routing(a).targets());
            events.push((rate, next, !ok));
        }
        Outcomes {
            active_cases: self.active_cases(&post),
            events,
        }
    }
}

/// The uniformized, bounded MDP in compressed sparse row form.
#[derive(Clone, Debug)]
pub struct BoundedMdp {
    pub tau: f64,
    pub kappa: f64,
    pub bound: usize,
    pub arrival_rate: f64,
    key_len: usize,
    keys: Vec<u16>,
    index: HashMap<StateKey, u32>,
    /// Per state, range into the (state, action) arrays.
    sa_start: Vec<usize>,
    sa_action: Vec<u16>,
    sa_reward: Vec<f64>,
    /// Per (state, action), range into the transition arrays.
    tr_start: Vec<usize>,
    tr_target: Vec<u32>,
    tr_prob: Vec<f64>,
    layout_hash: String,
    fingerprint: String,
    model_name: String,
}

fn size_estimate(model: &ProcessModel, bound: usize) -> f64 {
    let queues = (bound as f64 + 1.0).powi(model.num_activities() as i32);
    let slots: f64 = (0..model.num_resources())
        .map(|r| 1.0 + model.eligible_activities(r).len() as f64)
        .product();
    queues * slots
}

/// All abstract states reachable from the empty state with queues capped at
/// `bound`, in breadth-first order (the empty state first). The set is closed
/// under events and under assignments, so post-decision states are included.
pub fn enumerate_states(model: &ProcessModel, bound: usize, max_states: usize) -> Result<Vec<StateKey>, MdpError> {
    let count = case_count_rule(model)?;
    let estimate = size_estimate(model, bound);
    if estimate > max_states as f64 {
        return Err(MdpError::TooManyStates {
            estimate,
            limit: max_states,
        });
    }
    let dynamics = Dynamics {
        model,
        bound: bound.min(u16::MAX as usize - 1) as u16,
        count,
    };
    let start: StateKey = vec![0; model.num_activities() + model.num_resources()];
    let mut seen: HashMap<StateKey, u32> = HashMap::new();
    let mut order = vec![start.clone()];
    seen.insert(start.clone(), 0);
    let mut frontier = VecDeque::from([start]);
    while let Some(s) = frontier.pop_front() {
        for action in dynamics.feasible(&s) {
            let post = dynamics.post_decision(&s, action);
            let events = dynamics.outcomes(&s, action).events.into_iter().map(|e| e.1);
            for next in std::iter::once(post).chain(events) {
                if !seen.contains_key(&next) {
                    seen.insert(next.clone(), order.len() as u32);
                    order.push(next.clone());
                    frontier.push_back(next);
                }
            }
        }
    }
    Ok(order)
}

/// Builds the uniformized MDP: per step, reward `-|C| * tau` (plus the
/// overflow penalty), event probabilities `tau * rate` and a self-loop
/// carrying the remaining mass.
pub fn uniformize(model: &ProcessModel, config: &SolverConfig) -> Result<BoundedMdp, MdpError> {
    if !(config.kappa > 0.0 && config.kappa <= 1.0) {
        return Err(MdpError::Kappa(config.kappa));
    }
    let states = enumerate_states(model, config.bound, config.max_states)?;
    let dynamics = Dynamics {
        model,
        bound: config.bound.min(u16::MAX as usize - 1) as u16,
        count: case_count_rule(model)?,
    };
    let tau = config.kappa / model.max_total_rate();
    let index: HashMap<StateKey, u32> = states
        .iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), i as u32))
        .collect();

    type Row = Vec<(u16, f64, Vec<(u32, f64)>)>;
    let rows: Vec<Row> = states
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            dynamics
                .feasible(s)
                .into_iter()
                .map(|action| {
                    let out = dynamics.outcomes(s, action);
                    let mut reward = -(out.active_cases as f64) * tau;
                    let mut probs: Vec<(u32, f64)> = Vec::with_capacity(out.events.len() + 1);
                    let mut moved = 0.0;
                    for (rate, next, overflow) in &out.events {
                        let p = tau * rate;
                        moved += p;
                        if *overflow {
                            reward -= p * config.overflow_penalty * tau;
                        }
                        probs.push((index[next], p));
                    }
                    probs.push((i as u32, 1.0 - moved));
                    probs.sort_by_key(|&(t, _)| t);
                    let mut merged: Vec<(u32, f64)> = Vec::with_capacity(probs.len());
                    for (t, p) in probs {
                        match merged.last_mut() {
                            Some((lt, lp)) if *lt == t => *lp += p,
                            _ => merged.push((t, p)),
                        }
                    }
                    (action as u16, reward, merged)
                })
                .collect()
        })
        .collect();

    let key_len = model.num_activities() + model.num_resources();
    let mut mdp = BoundedMdp {
        tau,
        kappa: config.kappa,
        bound: config.bound,
        arrival_rate: model.arrival_rate(),
        key_len,
        keys: states.concat(),
        index,
        sa_start: vec![0],
        sa_action: Vec::new(),
        sa_reward: Vec::new(),
        tr_start: vec![0],
        tr_target: Vec::new(),
        tr_prob: Vec::new(),
        layout_hash: model.layout_hash(),
        fingerprint: model.fingerprint(),
        model_name: model.name().to_string(),
    };
    for row in rows {
        for (action, reward, trans) in row {
            mdp.sa_action.push(action);
            mdp.sa_reward.push(reward);
            for (t, p) in trans {
                mdp.tr_target.push(t);
                mdp.tr_prob.push(p);
            }
            mdp.tr_start.push(mdp.tr_target.len());
        }
        mdp.sa_start.push(mdp.sa_action.len());
    }
    Ok(mdp)
}

/// One state-action pair of a [`BoundedMdp`].
#[derive(Clone, Debug, PartialEq)]
pub struct ActionRow<'a> {
    pub action: usize,
    pub reward: f64,
    pub targets: &'a [u32],
    pub probs: &'a [f64],
}

impl BoundedMdp {
    pub fn num_states(&self) -> usize {
        self.sa_start.len() - 1
    }

    pub fn num_pairs(&self) -> usize {
        self.sa_action.len()
    }

    pub fn state(&self, i: usize) -> &[u16] {
        &self.keys[i * self.key_len..(i + 1) * self.key_len]
    }

    pub fn state_index(&self, key: &[u16]) -> Option<usize> {
        self.index.get(key).map(|&i| i as usize)
    }

    pub fn actions(&self, s: usize) -> impl Iterator<Item = ActionRow<'_>> + '_ {
        (self.sa_start[s]..self.sa_start[s + 1]).map(move |k| {
            let range = self.tr_start[k]..self.tr_start[k + 1];
            ActionRow {
                action: self.sa_action[k] as usize,
                reward: self.sa_reward[k],
                targets: &self.tr_target[range.clone()],
                probs: &self.tr_prob[range],
            }
        })
    }

    /// Probability of staying in `s` under `action`.
    pub fn self_loop(&self, s: usize, action: usize) -> Option<f64> {
        self.actions(s).find(|row| row.action == action).map(|row| {
            row.targets
                .iter()
                .zip(row.probs)
                .filter(|(t, _)| **t as usize == s)
                .map(|(_, p)| *p)
                .sum()
        })
    }

    fn q_value(&self, row: &ActionRow<'_>, values: &[f64]) -> f64 {
        row.reward
            + row
                .targets
                .iter()
                .zip(row.probs)
                .map(|(&t, &p)| p * values[t as usize])
                .sum::<f64>()
    }

    /// Q-values of every feasible action in state `s` under `values`.
    pub fn q_values(&self, s: usize, values: &[f64]) -> Vec<(usize, f64)> {
        self.actions(s)
            .map(|row| (row.action, self.q_value(&row, values)))
            .collect()
    }

    /// Greedy action; lowest action index among near-ties.
    fn greedy(&self, s: usize, values: &[f64]) -> (usize, f64) {
        let q = self.q_values(s, values);
        let best = q.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * best.abs().max(1.0);
        let action = q
            .iter()
            .filter(|x| x.1 >= best - slack)
            .map(|x| x.0)
            .min()
            .expect("postpone is always available");
        (action, best)
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    /// Relative values, normalized to 0 at the empty state.
    pub values: Vec<f64>,
    pub policy: Vec<u16>,
    /// Average reward per uniform step.
    pub gain: f64,
    pub span_history: Vec<f64>,
    pub iterations: usize,
    pub tau: f64,
    pub arrival_rate: f64,
}

impl Solution {
    /// Long-run mean cycle time implied by the gain via Little's law.
    pub fn mean_cycle_time(&self) -> f64 {
        -self.gain / (self.tau * self.arrival_rate)
    }
}

/// Relative value iteration with Jacobi sweeps; stops once the span of
/// successive differences is at most `tolerance * tau`.
pub fn value_iteration(mdp: &BoundedMdp, tolerance: f64, max_iterations: usize) -> Result<Solution, MdpError> {
    let n = mdp.num_states();
    let threshold = tolerance * mdp.tau;
    let mut values = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut history = Vec::new();
    for iteration in 1..=max_iterations {
        next.par_iter_mut().enumerate().for_each(|(s, v)| {
            *v = mdp
                .actions(s)
                .map(|row| mdp.q_value(&row, &values))
                .fold(f64::NEG_INFINITY, f64::max);
        });
        let (lo, hi) = next
            .iter()
            .zip(&values)
            .map(|(a, b)| a - b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        let span = hi - lo;
        history.push(span);
        let offset = next[0];
        for (v, x) in values.iter_mut().zip(&next) {
            *v = x - offset;
        }
        if span <= threshold {
            let policy = (0..n)
                .into_par_iter()
                .map(|s| mdp.greedy(s, &values).0 as u16)
                .collect();
            return Ok(Solution {
                values,
                policy,
                gain: 0.5 * (hi + lo),
                span_history: history,
                iterations: iteration,
                tau: mdp.tau,
                arrival_rate: mdp.arrival_rate,
            });
        }
        if !span.is_finite() {
            break;
        }
    }
    Err(MdpError::NotConverged {
        iterations: max_iterations,
        last_span: history.last().copied().unwrap_or(f64::NAN),
    })
}

/// Uniformizes `model` and solves it.
pub fn solve(model: &ProcessModel, config: &SolverConfig) -> Result<(BoundedMdp, Solution), MdpError> {
    let mdp = uniformize(model, config)?;
    let solution = value_iteration(&mdp, config.tolerance, config.max_iterations)?;
    Ok((mdp, solution))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SolutionFile {
    format_version: u32,
    model_name: String,
    layout_hash: String,
    fingerprint: String,
    bound: usize,
    kappa: f64,
    tau: f64,
    gain: f64,
    mean_cycle_time: f64,
    iterations: usize,
    /// `(state key, action index)` pairs.
    actions: Vec<(StateKey, u16)>,
}

/// Stationary policy read off a solution. States outside the table fall back
/// to SPT with a logged warning.
#[derive(Debug)]
pub struct OptimalPolicy {
    table: HashMap<StateKey, u16>,
    bound: usize,
    gain: f64,
    mean_cycle_time: f64,
    layout_hash: String,
    fingerprint: String,
    model_name: String,
    kappa: f64,
    tau: f64,
    iterations: usize,
    warned: AtomicBool,
}

impl Clone for OptimalPolicy {
    fn clone(&self) -> Self {
        OptimalPolicy {
            table: self.table.clone(),
            warned: AtomicBool::new(false),
            layout_hash: self.layout_hash.clone(),
            fingerprint: self.fingerprint.clone(),
            model_name: self.model_name.clone(),
            ..*self
        }
    }
}

impl PartialEq for OptimalPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.table == other.table && self.bound == other.bound && self.layout_hash == other.layout_hash
    }
}

impl OptimalPolicy {
    pub fn new(mdp: &BoundedMdp, solution: &Solution) -> Self {
        let table = (0..mdp.num_states())
            .map(|s| (mdp.state(s).to_vec(), solution.policy[s]))
            .collect();
        OptimalPolicy {
            table,
            bound: mdp.bound,
            gain: solution.gain,
            mean_cycle_time: solution.mean_cycle_time(),
            layout_hash: mdp.layout_hash.clone(),
            fingerprint: mdp.fingerprint.clone(),
            model_name: mdp.model_name.clone(),
            kappa: mdp.kappa,
            tau: mdp.tau,
            iterations: solution.iterations,
            warned: AtomicBool::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }
    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
    pub fn bound(&self) -> usize {
        self.bound
    }
    pub fn gain(&self) -> f64 {
        self.gain
    }
    /// Mean cycle time predicted by the solver.
    pub fn predicted_cycle_time(&self) -> f64 {
        self.mean_cycle_time
    }

    /// Stored action for the abstract state of `state` (queues truncated at
    /// the bound), if that abstract state was enumerated.
    pub fn lookup(&self, state: &ExecutionState) -> Option<usize> {
        self.table.get(&state.observation_key(self.bound)).map(|&a| a as usize)
    }

    pub fn lookup_key(&self, key: &[u16]) -> Option<usize> {
        self.table.get(key).map(|&a| a as usize)
    }

    pub fn save(&self, path: &Path) -> Result<(), MdpError> {
        let mut actions: Vec<(StateKey, u16)> = self.table.iter().map(|(k, a)| (k.clone(), *a)).collect();
        actions.sort();
        let file = SolutionFile {
            format_version: SOLUTION_FORMAT_VERSION,
            model_name: self.model_name.clone(),
            layout_hash: self.layout_hash.clone(),
            fingerprint: self.fingerprint.clone(),
            bound: self.bound,
            kappa: self.kappa,
            tau: self.tau,
            gain: self.gain,
            mean_cycle_time: self.mean_cycle_time,
            iterations: self.iterations,
            actions,
        };
        let json = serde_json::to_vec(&file).map_err(|e| MdpError::File(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    /// Loads a solution and checks it was computed for the layout of `model`.
    pub fn load(path: &Path, model: &ProcessModel) -> Result<Self, MdpError> {
        let bytes = fs::read(path)?;
        let file: SolutionFile = serde_json::from_slice(&bytes).map_err(|e| MdpError::File(e.to_string()))?;
        if file.format_version != SOLUTION_FORMAT_VERSION {
            return Err(MdpError::File(format!("unsupported format version {}", file.format_version)));
        }
        if file.layout_hash != model.layout_hash() {
            return Err(MdpError::LayoutMismatch {
                expected: model.layout_hash(),
                found: file.layout_hash,
            });
        }
        let key_len = model.num_activities() + model.num_resources();
        if file.actions.iter().any(|(k, a)| k.len() != key_len || *a as usize >= model.num_actions()) {
            return Err(MdpError::File("state key or action out of range".into()));
        }
        Ok(OptimalPolicy {
            table: file.actions.into_iter().collect(),
            bound: file.bound,
            gain: file.gain,
            mean_cycle_time: file.mean_cycle_time,
            layout_hash: file.layout_hash,
            fingerprint: file.fingerprint,
            model_name: file.model_name,
            kappa: file.kappa,
            tau: file.tau,
            iterations: file.iterations,
            warned: AtomicBool::new(false),
        })
    }
}

impl Policy for OptimalPolicy {
    fn name(&self) -> String {
        "optimal".into()
    }

    fn choose(&self, state: &ExecutionState, model: &ProcessModel, mask: &ActionMask, rng: &mut RngStream) -> usize {
        match self.lookup(state) {
            Some(a) if mask.is_feasible(a) => a,
            _ => {
                if !self.warned.swap(true, Ordering::Relaxed) {
                    log::warn!("state outside the solved state space; falling back to SPT");
                }
                Heuristic::Spt.choose(state, model, mask, rng)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_scenario, compose, ScenarioKind, ScenarioSpec};

    fn mm1() -> ProcessModel {
        ProcessModel::mm1(0.5, 1.0).unwrap()
    }

    fn config(bound: usize) -> SolverConfig {
        SolverConfig {
            bound,
            ..Default::default()
        }
    }

    #[test]
    fn mm1_bound_two_has_six_states() {
        let states = enumerate_states(&mm1(), 2, DEFAULT_MAX_STATES).unwrap();
        assert_eq!(states.len(), 6);
        let mut sorted = states.clone();
        sorted.sort();
        assert_eq!(
            sorted,
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1], vec![2, 0], vec![2, 1]]
        );
        assert_eq!(states[0], vec![0, 0]);
    }

    #[test]
    fn bound_zero_keeps_queues_empty() {
        let m = build_scenario(&ScenarioSpec::reference(ScenarioKind::SlowServer)).unwrap();
        let states = enumerate_states(&m, 0, DEFAULT_MAX_STATES).unwrap();
        assert!(states.iter().all(|s| s[..2].iter().all(|&q| q == 0)));
        // with empty queues no resource can ever start
        assert_eq!(states.len(), 1);
    }

    #[test]
    fn composite_trips_the_guard() {
        let stage = build_scenario(&ScenarioSpec::reference(ScenarioKind::LowUtilization)).unwrap();
        let big = compose(&vec![stage; 6]).unwrap();
        assert!(matches!(
            enumerate_states(&big, 100, DEFAULT_MAX_STATES),
            Err(MdpError::TooManyStates { .. })
        ));
    }

    #[test]
    fn kappa_checked() {
        for kappa in [0.0, -0.1, 1.5, f64::NAN] {
            let cfg = SolverConfig {
                kappa,
                ..config(2)
            };
            assert!(matches!(uniformize(&mm1(), &cfg), Err(MdpError::Kappa(_))));
        }
    }

    #[test]
    fn tau_from_max_rate() {
        // max total rate 0.5 + 1.0 = 1.5, kappa 0.5
        let mdp = uniformize(&mm1(), &config(3)).unwrap();
        assert!((mdp.tau - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn busy_state_rewards_and_probabilities() {
        let m = mm1();
        let mdp = uniformize(&m, &config(5)).unwrap();
        // three cases: two waiting, one in service; postpone
        let s = mdp.state_index(&[2, 1]).unwrap();
        let row = mdp.actions(s).next().unwrap();
        assert_eq!(row.action, m.postpone_index());
        assert!((row.reward - (-3.0 * mdp.tau)).abs() < 1e-15);
        let p = |key: &[u16]| {
            let t = mdp.state_index(key).unwrap() as u32;
            row.targets.iter().zip(row.probs).find(|(x, _)| **x == t).map(|(_, p)| *p).unwrap()
        };
        assert!((p(&[3, 1]) - 0.5 / 3.0).abs() < 1e-15);
        assert!((p(&[2, 0]) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p(&[2, 1]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_event_half_step_self_loop() {
        // only arrivals in the empty state: tau = 0.5 / rate_max, rate 0.5
        let m = ProcessModel::mm1(1.0, 1e-9).unwrap();
        let cfg = SolverConfig {
            kappa: 0.5,
            ..config(3)
        };
        let mdp = uniformize(&m, &cfg).unwrap();
        let s = mdp.state_index(&[0, 0]).unwrap();
        let loop_p = mdp.self_loop(s, m.postpone_index()).unwrap();
        assert!((loop_p - (1.0 - mdp.tau * 1.0)).abs() < 1e-12);
        assert!((loop_p - 0.5).abs() < 1e-6);
    }

    #[test]
    fn mm1_gain_matches_queueing_formula() {
        let (_, sol) = solve(&mm1(), &config(100)).unwrap();
        let ct = sol.mean_cycle_time();
        assert!((ct - 2.0).abs() / 2.0 <= 0.02, "{ct}");
        assert!(*sol.span_history.last().unwrap() <= 1e-6 * sol.tau);
    }

    #[test]
    fn overflow_is_penalized() {
        let m = mm1();
        let cfg = config(1);
        let mdp = uniformize(&m, &cfg).unwrap();
        let s = mdp.state_index(&[1, 1]).unwrap();
        let row = mdp.actions(s).next().unwrap();
        let arrival_p = mdp.tau * 0.5;
        let expected = -2.0 * mdp.tau - arrival_p * cfg.overflow_penalty * mdp.tau;
        assert!((row.reward - expected).abs() < 1e-9);
    }

    #[test]
    fn slow_server_prefers_fast_resource() {
        let m = build_scenario(&ScenarioSpec::reference(ScenarioKind::SlowServer)).unwrap();
        let (mdp, sol) = solve(&m, &config(30)).unwrap();
        let fast = if m.rate(0, 0) > m.rate(1, 0) { 0 } else { 1 };
        for s in 0..mdp.num_states() {
            let key = mdp.state(s);
            let na = m.num_activities();
            let action = sol.policy[s] as usize;
            assert!(mdp.actions(s).any(|r| r.action == action));
            // the fast resource free with work waiting: never idles it
            if key[na + fast] == 0 && key[..na].iter().any(|&q| q > 0) {
                let (r, _) = m.allowed_assignments().get(action).copied().unwrap_or((usize::MAX, 0));
                assert_eq!(r, fast, "state {key:?}");
            }
        }
    }

    #[test]
    fn export_import_round_trip() {
        let m = build_scenario(&ScenarioSpec::reference(ScenarioKind::NSystem)).unwrap();
        let (mdp, sol) = solve(&m, &config(20)).unwrap();
        let policy = OptimalPolicy::new(&mdp, &sol);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.json");
        policy.save(&path).unwrap();
        let back = OptimalPolicy::load(&path, &m).unwrap();
        assert_eq!(back, policy);
        for s in 0..mdp.num_states() {
            assert_eq!(back.lookup_key(mdp.state(s)), Some(sol.policy[s] as usize));
        }
        let other = build_scenario(&ScenarioSpec::reference(ScenarioKind::Parallel)).unwrap();
        assert!(OptimalPolicy::load(&path, &other).is_err());
    }

    #[test]
    fn lookup_truncates_queues() {
        let m = mm1();
        let (mdp, sol) = solve(&m, &config(10)).unwrap();
        let policy = OptimalPolicy::new(&mdp, &sol);
        let mut s = ExecutionState::new(&m, &RngStream::new(1));
        assert_eq!(policy.lookup(&s), Some(sol.policy[0] as usize));
        while s.queue_len(0) < 25 {
            s.step(&m, m.postpone_index()).unwrap();
        }
        let capped = mdp.state_index(&[10, 0]).unwrap();
        assert_eq!(policy.lookup(&s), Some(sol.policy[capped] as usize));
        assert_eq!(policy.lookup(&s), Some(0));
    }

    #[test]
    fn single_state_gain() {
        let mdp = BoundedMdp {
            tau: 1.0,
            kappa: 1.0,
            bound: 0,
            arrival_rate: 1.0,
            key_len: 1,
            keys: vec![0],
            index: HashMap::from([(vec![0], 0)]),
            sa_start: vec![0, 1],
            sa_action: vec![0],
            sa_reward: vec![-1.0],
            tr_start: vec![0, 1],
            tr_target: vec![0],
            tr_prob: vec![1.0],
            layout_hash: String::new(),
            fingerprint: String::new(),
            model_name: String::new(),
        };
        for tol in [1e-3, 1e-9] {
            let sol = value_iteration(&mdp, tol, 10).unwrap();
            assert_eq!(sol.gain, -1.0);
            assert_eq!(sol.iterations, 1);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn rows_are_stochastic(kind in 0usize..6, bound in 0usize..6, kappa in 0.05f64..1.0) {
                let m = build_scenario(&ScenarioSpec::reference(ScenarioKind::ALL[kind])).unwrap();
                let cfg = SolverConfig { kappa, ..config(bound) };
                let mdp = uniformize(&m, &cfg).unwrap();
                for s in 0..mdp.num_states() {
                    for row in mdp.actions(s) {
                        let total: f64 = row.probs.iter().sum();
                        prop_assert!((total - 1.0).abs() <= 1e-12);
                        prop_assert!(row.probs.iter().all(|&p| p >= 0.0));
                        prop_assert!(mdp.self_loop(s, row.action).unwrap() >= 1.0 - kappa - 1e-12);
                    }
                }
            }
        }
    }
}
