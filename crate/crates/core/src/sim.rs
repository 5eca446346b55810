//! Discrete-event simulation of a process model as a continuous-time MDP.
//!
//! Every decision is followed by exactly one event: the chosen assignment (if
//! any) starts, then the clock jumps to the earliest pending arrival or
//! completion. Event times are exponential draws, so the winner of the race
//! between pending events is `rate_e / sum(rates)`.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::model::{ProcessModel, Routing};
use crate::policy::Policy;
use crate::rng::RngStream;

/// Queue-length feature cap; also the queue bound of the exact solver.
pub const QUEUE_CAP: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("action {index} is not feasible in the current state")]
    Infeasible { index: usize },
    #[error("no pending event: the process is stalled")]
    Stalled,
    #[error("uniform step {tau} exceeds the inverse of the total event rate {rate}")]
    StepTooLarge { tau: f64, rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instance {
    pub case: u64,
    pub activity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Busy {
    pub instance: Instance,
    pub started: f64,
    pub completes_at: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct CaseInfo {
    arrival: f64,
    /// Outstanding instances (queued or in service).
    tokens: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletedCase {
    pub case: u64,
    pub cycle_time: f64,
}

/// One executed activity instance, for event-log export.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivityRecord {
    pub case: u64,
    pub activity: usize,
    pub resource: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Assign { resource: usize, activity: usize },
    Postpone,
}

impl Action {
    pub fn from_index(model: &ProcessModel, index: usize) -> Action {
        match model.allowed_assignments().get(index) {
            Some(&(resource, activity)) => Action::Assign { resource, activity },
            None => Action::Postpone,
        }
    }

    pub fn index(self, model: &ProcessModel) -> Option<usize> {
        match self {
            Action::Assign { resource, activity } => model.assignment_index(resource, activity),
            Action::Postpone => Some(model.postpone_index()),
        }
    }
}

/// Feasibility of every action index; postpone is last and always feasible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionMask {
    feasible: Vec<bool>,
}

impl ActionMask {
    pub fn is_feasible(&self, index: usize) -> bool {
        self.feasible.get(index).copied().unwrap_or(false)
    }
    pub fn as_slice(&self) -> &[bool] {
        &self.feasible
    }
    pub fn len(&self) -> usize {
        self.feasible.len()
    }
    pub fn is_empty(&self) -> bool {
        self.feasible.is_empty()
    }
    /// Feasible action indices in increasing order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.feasible
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
    }
    pub fn count(&self) -> usize {
        self.feasible.iter().filter(|f| **f).count()
    }
    /// Postpone is the only option.
    pub fn forced_postpone(&self) -> bool {
        self.count() == 1
    }
    pub fn from_bools(feasible: Vec<bool>) -> Self {
        ActionMask { feasible }
    }
}

/// Agent-facing features: resource availability bits, one busy bit per
/// allowed assignment, and capped queue lengths scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn len_for(model: &ProcessModel) -> usize {
        model.num_resources() + model.allowed_assignments().len() + model.num_activities()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Arrival { case: u64 },
    Completion { resource: usize, instance: Instance },
    /// Uniformized self-loop: time passes, nothing happens.
    Fake,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Active cases during the transition (after the assignment, before the event).
    pub active_cases: usize,
    pub dt: f64,
    pub event: Event,
    pub completions: Vec<CompletedCase>,
    pub finished: Option<ActivityRecord>,
}

#[derive(Clone, Debug)]
struct Streams {
    arrivals: ChaCha8Rng,
    uniform: ChaCha8Rng,
    service: Vec<ChaCha8Rng>,
}

impl Streams {
    fn new(rng: &RngStream, activities: usize) -> Self {
        Streams {
            arrivals: rng.lane(0),
            uniform: rng.lane(1),
            service: (0..activities as u64).map(|a| rng.lane(2 + a)).collect(),
        }
    }
}

/// The execution state: active cases, per-activity queues, resource slots,
/// the clock and the pending arrival. Completion times of busy resources
/// live in their slots.
///
/// Arrivals draw from their own random lane and the service times of each
/// activity from another (scaled by the serving resource's rate), so two
/// copies driven by the same stream stay synchronised across different
/// decisions.
#[derive(Clone, Debug)]
pub struct ExecutionState {
    clock: f64,
    next_case: u64,
    cases: BTreeMap<u64, CaseInfo>,
    queues: Vec<VecDeque<Instance>>,
    slots: Vec<Option<Busy>>,
    next_arrival: Option<f64>,
    arrival_limit: Option<u64>,
    completed: Vec<CompletedCase>,
    streams: Streams,
}

fn exp_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e / rate
}

impl ExecutionState {
    /// Empty process at time 0 with the first arrival scheduled and no limit
    /// on the number of arrivals.
    pub fn new(model: &ProcessModel, rng: &RngStream) -> Self {
        let mut streams = Streams::new(rng, model.num_activities());
        let first = exp_draw(&mut streams.arrivals, model.arrival_rate());
        ExecutionState {
            clock: 0.0,
            next_case: 0,
            cases: BTreeMap::new(),
            queues: vec![VecDeque::new(); model.num_activities()],
            slots: vec![None; model.num_resources()],
            next_arrival: Some(first),
            arrival_limit: None,
            completed: Vec::new(),
            streams,
        }
    }

    /// Like [`ExecutionState::new`] but arrivals stop after `n_cases`.
    pub fn with_arrival_limit(model: &ProcessModel, rng: &RngStream, n_cases: u64) -> Self {
        let mut s = Self::new(model, rng);
        s.arrival_limit = Some(n_cases);
        if n_cases == 0 {
            s.next_arrival = None;
        }
        s
    }

    pub fn snapshot(&self) -> ExecutionState {
        self.clone()
    }

    pub fn restore(snapshot: &ExecutionState) -> ExecutionState {
        snapshot.clone()
    }

    /// Replaces the random streams and redraws every pending event time from
    /// the new streams. Valid by memorylessness; used to branch independent
    /// (or common-random-number) futures from one snapshot.
    pub fn reseed(&mut self, model: &ProcessModel, rng: &RngStream) {
        self.streams = Streams::new(rng, model.num_activities());
        self.redraw_pending(model);
    }

    fn redraw_pending(&mut self, model: &ProcessModel) {
        if self.next_arrival.is_some() {
            self.next_arrival =
                Some(self.clock + exp_draw(&mut self.streams.arrivals, model.arrival_rate()));
        }
        for (r, slot) in self.slots.iter_mut().enumerate() {
            if let Some(b) = slot {
                let rate = model.rate(r, b.instance.activity).expect("eligible");
                b.completes_at = self.clock + exp_draw(&mut self.streams.service[b.instance.activity], rate);
            }
        }
    }

    /// Lifts any arrival limit and forgets the completed-case history; used
    /// for rollout roots.
    pub fn into_root(mut self, model: &ProcessModel) -> Self {
        self.completed.clear();
        if self.arrival_limit.take().is_some() && self.next_arrival.is_none() {
            self.next_arrival =
                Some(self.clock + exp_draw(&mut self.streams.arrivals, model.arrival_rate()));
        }
        self
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }
    pub fn num_active_cases(&self) -> usize {
        self.cases.len()
    }
    pub fn queue_len(&self, activity: usize) -> usize {
        self.queues[activity].len()
    }
    pub fn queue(&self, activity: usize) -> &VecDeque<Instance> {
        &self.queues[activity]
    }
    /// Every resource is free.
    pub fn is_idle(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }
    pub fn is_free(&self, resource: usize) -> bool {
        self.slots[resource].is_none()
    }
    pub fn busy(&self, resource: usize) -> Option<&Busy> {
        self.slots[resource].as_ref()
    }
    pub fn case_arrival(&self, case: u64) -> Option<f64> {
        self.cases.get(&case).map(|c| c.arrival)
    }
    pub fn arrivals(&self) -> u64 {
        self.next_case
    }
    pub fn next_arrival(&self) -> Option<f64> {
        self.next_arrival
    }
    pub fn completed(&self) -> &[CompletedCase] {
        &self.completed
    }
    pub fn take_completed(&mut self) -> Vec<CompletedCase> {
        std::mem::take(&mut self.completed)
    }

    /// No more arrivals and no active case.
    pub fn is_terminal(&self) -> bool {
        self.next_arrival.is_none() && self.cases.is_empty()
    }

    pub fn feasible_actions(&self, model: &ProcessModel) -> ActionMask {
        let mut feasible: Vec<bool> = model
            .allowed_assignments()
            .iter()
            .map(|&(r, a)| self.slots[r].is_none() && !self.queues[a].is_empty())
            .collect();
        feasible.push(true);
        ActionMask { feasible }
    }

    pub fn observe(&self, model: &ProcessModel) -> Observation {
        let mut v = Vec::with_capacity(Observation::len_for(model));
        v.extend(self.slots.iter().map(|s| if s.is_none() { 1.0 } else { 0.0 }));
        v.extend(model.allowed_assignments().iter().map(|&(r, a)| {
            match &self.slots[r] {
                Some(b) if b.instance.activity == a => 1.0,
                _ => 0.0,
            }
        }));
        v.extend(
            self.queues
                .iter()
                .map(|q| (q.len() as f64 / QUEUE_CAP as f64).min(1.0)),
        );
        Observation(v)
    }

    /// Compact key carrying exactly the information of the observation:
    /// capped queue lengths followed by, per resource, 0 when free or
    /// `1 + activity` when busy.
    pub fn observation_key(&self, cap: usize) -> Vec<u16> {
        self.queues
            .iter()
            .map(|q| q.len().min(cap) as u16)
            .chain(
                self.slots
                    .iter()
                    .map(|s| s.as_ref().map_or(0, |b| b.instance.activity as u16 + 1)),
            )
            .collect()
    }

    fn enqueue(&mut self, inst: Instance) {
        let q = &mut self.queues[inst.activity];
        // FIFO by case arrival; case ids increase with arrival time.
        match q.back() {
            Some(last) if last.case > inst.case => {
                let pos = q.partition_point(|i| i.case <= inst.case);
                q.insert(pos, inst);
            }
            _ => q.push_back(inst),
        }
    }

    fn assign(&mut self, model: &ProcessModel, index: usize) -> Result<(), SimError> {
        let Some(&(r, a)) = model.allowed_assignments().get(index) else {
            return if index == model.postpone_index() {
                Ok(())
            } else {
                Err(SimError::Infeasible { index })
            };
        };
        if self.slots[r].is_some() || self.queues[a].is_empty() {
            return Err(SimError::Infeasible { index });
        }
        let instance = self.queues[a].pop_front().expect("non-empty");
        let rate = model.rate(r, a).expect("eligible");
        let completes_at = self.clock + exp_draw(&mut self.streams.service[a], rate);
        self.slots[r] = Some(Busy {
            instance,
            started: self.clock,
            completes_at,
        });
        Ok(())
    }

    fn arrive(&mut self, model: &ProcessModel) -> u64 {
        let case = self.next_case;
        self.next_case += 1;
        let initial = model.initial_activities();
        self.cases.insert(
            case,
            CaseInfo {
                arrival: self.clock,
                tokens: initial.len() as u32,
            },
        );
        for &activity in initial {
            self.enqueue(Instance { case, activity });
        }
        let more = self.arrival_limit.is_none_or(|n| self.next_case < n);
        self.next_arrival = more
            .then(|| self.clock + exp_draw(&mut self.streams.arrivals, model.arrival_rate()));
        case
    }

    /// Frees `resource` and routes the finished instance.
    fn complete(&mut self, model: &ProcessModel, resource: usize) -> (Instance, ActivityRecord, Option<CompletedCase>) {
        let busy = self.slots[resource].take().expect("busy resource");
        let inst = busy.instance;
        let record = ActivityRecord {
            case: inst.case,
            activity: inst.activity,
            resource,
            start: busy.started,
            end: self.clock,
        };
        let info = self.cases.get_mut(&inst.case).expect("active case");
        info.tokens -= 1;
        let spawn: &[usize] = match model.routing(inst.activity) {
            Routing::Complete => &[],
            Routing::Successor(_) | Routing::Split(_) => model.routing(inst.activity).targets(),
            Routing::Join { then } => {
                if info.tokens > 0 {
                    return (inst, record, None);
                }
                then
            }
        };
        if spawn.is_empty() {
            debug_assert_eq!(info.tokens, 0);
            let arrival = info.arrival;
            self.cases.remove(&inst.case);
            let done = CompletedCase {
                case: inst.case,
                cycle_time: self.clock - arrival,
            };
            self.completed.push(done);
            return (inst, record, Some(done));
        }
        info.tokens += spawn.len() as u32;
        for &activity in spawn {
            self.enqueue(Instance {
                case: inst.case,
                activity,
            });
        }
        (inst, record, None)
    }

    fn next_event(&self) -> Option<(f64, Option<usize>)> {
        let mut best = self.next_arrival.map(|t| (t, None));
        for (r, slot) in self.slots.iter().enumerate() {
            if let Some(b) = slot {
                if best.is_none_or(|(t, _)| b.completes_at < t) {
                    best = Some((b.completes_at, Some(r)));
                }
            }
        }
        best
    }

    fn apply_event(&mut self, model: &ProcessModel, which: Option<usize>) -> (Event, Vec<CompletedCase>, Option<ActivityRecord>) {
        match which {
            None => {
                let case = self.arrive(model);
                (Event::Arrival { case }, Vec::new(), None)
            }
            Some(r) => {
                let (instance, record, done) = self.complete(model, r);
                (
                    Event::Completion {
                        resource: r,
                        instance,
                    },
                    done.into_iter().collect(),
                    Some(record),
                )
            }
        }
    }

    /// One decision step: start the assignment with action `index` (if not
    /// postpone), then advance to the earliest pending event and apply it.
    pub fn step(&mut self, model: &ProcessModel, index: usize) -> Result<StepOutcome, SimError> {
        if index == model.postpone_index() && self.next_event().is_none() {
            return Err(SimError::Stalled);
        }
        self.assign(model, index)?;
        // an assignment always leaves at least its own completion pending
        let (t, which) = self.next_event().expect("pending event");
        let active_cases = self.cases.len();
        let dt = t - self.clock;
        self.clock = t;
        let (event, completions, finished) = self.apply_event(model, which);
        Ok(StepOutcome {
            active_cases,
            dt,
            event,
            completions,
            finished,
        })
    }

    pub fn step_action(&mut self, model: &ProcessModel, action: Action) -> Result<StepOutcome, SimError> {
        let index = action.index(model).ok_or(SimError::Infeasible {
            index: usize::MAX,
        })?;
        self.step(model, index)
    }

    /// One step of the uniformized discrete-time chain with step `tau`: with
    /// probability `tau * total_rate` the action takes effect and one event
    /// (chosen proportionally to its rate) happens; otherwise the step is a
    /// self-loop back to the pre-decision state. The clock advances by `tau`
    /// either way.
    pub fn step_uniformized(&mut self, model: &ProcessModel, index: usize, tau: f64) -> Result<StepOutcome, SimError> {
        let mask = self.feasible_actions(model);
        if !mask.is_feasible(index) {
            return Err(SimError::Infeasible { index });
        }
        let added = model
            .allowed_assignments()
            .get(index)
            .map(|&(r, a)| (r, model.rate(r, a).expect("eligible")));
        let arrival_rate = if self.next_arrival.is_some() {
            model.arrival_rate()
        } else {
            0.0
        };
        let busy_rates: Vec<(usize, f64)> = self
            .slots
            .iter()
            .enumerate()
            .filter_map(|(r, s)| {
                s.as_ref()
                    .map(|b| (r, model.rate(r, b.instance.activity).expect("eligible")))
            })
            .chain(added)
            .collect();
        let total = arrival_rate + busy_rates.iter().map(|(_, x)| x).sum::<f64>();
        if total == 0.0 {
            return Err(SimError::Stalled);
        }
        if tau * total > 1.0 + 1e-12 {
            return Err(SimError::StepTooLarge { tau, rate: total });
        }
        let active_cases = self.cases.len();
        let u: f64 = self.streams.uniform.random();
        self.clock += tau;
        if u >= tau * total {
            self.redraw_pending(model);
            return Ok(StepOutcome {
                active_cases,
                dt: tau,
                event: Event::Fake,
                completions: Vec::new(),
                finished: None,
            });
        }
        self.assign(model, index)?;
        // Pick the event proportionally to its rate, reusing the same uniform.
        let mut x = u / tau;
        let mut which = None;
        if x >= arrival_rate {
            x -= arrival_rate;
            which = busy_rates.last().map(|(r, _)| *r);
            for &(r, rate) in &busy_rates {
                if x < rate {
                    which = Some(r);
                    break;
                }
                x -= rate;
            }
        }
        if let Some(r) = which {
            if let Some(b) = self.slots[r].as_mut() {
                b.completes_at = self.clock;
            }
        }
        let (event, completions, finished) = self.apply_event(model, which);
        // event times are not part of the uniformized state
        self.redraw_pending(model);
        Ok(StepOutcome {
            active_cases,
            dt: tau,
            event,
            completions,
            finished,
        })
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self, model: &ProcessModel) -> Result<(), String> {
        if self.slots.len() != model.num_resources() {
            return Err("resource slots do not cover all resources".into());
        }
        let mut tokens: BTreeMap<u64, u32> = BTreeMap::new();
        for (a, q) in self.queues.iter().enumerate() {
            for inst in q {
                if inst.activity != a {
                    return Err(format!("instance of {} queued at {a}", inst.activity));
                }
                *tokens.entry(inst.case).or_default() += 1;
            }
            if q.iter().zip(q.iter().skip(1)).any(|(x, y)| x.case > y.case) {
                return Err(format!("queue {a} not in arrival order"));
            }
        }
        for (r, slot) in self.slots.iter().enumerate() {
            if let Some(b) = slot {
                if !model.is_eligible(r, b.instance.activity) {
                    return Err(format!("resource {r} serves an ineligible activity"));
                }
                if b.completes_at < self.clock {
                    return Err(format!("resource {r} completion in the past"));
                }
                *tokens.entry(b.instance.case).or_default() += 1;
            }
        }
        for (case, n) in &tokens {
            match self.cases.get(case) {
                None => return Err(format!("instance of inactive case {case}")),
                Some(info) if info.tokens != *n => {
                    return Err(format!("case {case} token count {} != {n}", info.tokens))
                }
                _ => {}
            }
        }
        if let Some((case, _)) = self.cases.iter().find(|(c, _)| !tokens.contains_key(c)) {
            return Err(format!("active case {case} has no outstanding instance"));
        }
        let done = self.next_case - self.cases.len() as u64;
        if done < self.completed.len() as u64 {
            return Err("more completions than departures".into());
        }
        Ok(())
    }
}

/// Behaviour used to collect rollout roots.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Probability of replacing the policy's choice by a uniformly random
    /// feasible action.
    pub epsilon: f64,
    /// Arrivals per sampling episode (each episode starts empty).
    pub episode_cases: u64,
    /// The reservoir is filled from at least `stream_factor * count`
    /// decision states.
    pub stream_factor: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            epsilon: 0.25,
            episode_cases: 2500,
            stream_factor: 4,
        }
    }
}

/// Reservoir-samples `count` decision states (states with a voluntary
/// choice) from episodes driven by `policy` mixed with random actions. The
/// returned states are rollout roots: no history, unlimited arrivals.
pub fn sample_states(
    model: &ProcessModel,
    policy: &dyn Policy,
    count: usize,
    rng: &RngStream,
    config: &SampleConfig,
) -> Result<Vec<ExecutionState>, SimError> {
    assert!(count >= 1, "count must be positive");
    let mut reservoir: Vec<ExecutionState> = Vec::with_capacity(count);
    let mut pick = rng.derive("reservoir", 0);
    let mut seen = 0usize;
    let target = count.saturating_mul(config.stream_factor.max(1));
    let mut episode = 0u64;
    // Models where no voluntary decision ever occurs would loop forever.
    let max_episodes = 1000 + target as u64;
    while seen < target && episode < max_episodes {
        let ep_rng = rng.derive("sample-episode", episode);
        let mut act_rng = ep_rng.derive("behaviour", 0);
        let mut state = ExecutionState::new(model, &ep_rng);
        episode += 1;
        while state.arrivals() < config.episode_cases && seen < target {
            let mask = state.feasible_actions(model);
            let action = if mask.forced_postpone() {
                model.postpone_index()
            } else {
                if reservoir.len() < count {
                    reservoir.push(state.clone());
                } else {
                    let j = pick.below(seen + 1);
                    if j < count {
                        reservoir[j] = state.clone();
                    }
                }
                seen += 1;
                if act_rng.uniform() < config.epsilon {
                    let choices: Vec<usize> = mask.indices().collect();
                    choices[act_rng.below(choices.len())]
                } else {
                    policy.choose(&state, model, &mask, &mut act_rng)
                }
            };
            state.step(model, action)?;
            state.completed.clear();
        }
    }
    Ok(reservoir.into_iter().map(|s| s.into_root(model)).collect())
}
