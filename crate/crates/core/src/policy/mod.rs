//! Allocation policies: the heuristics, the neural policy and the common
//! interface used by the simulator, the trainer and the evaluation harness.

mod file;
mod net;

use std::fmt;
use std::str::FromStr;

use dashmap::DashMap;

pub use file::{
    decode_policy, encode_policy, load_policy, save_policy, PolicyFileError, PolicyHeader, StoredPolicy,
    POLICY_FORMAT_VERSION,
};
pub use net::{NetError, Optimizer, PolicyNet, TrainConfig, TrainingSample, TrainingSet};

use crate::model::ProcessModel;
use crate::rng::RngStream;
use crate::sim::{Action, ActionMask, ExecutionState, QUEUE_CAP};

/// Maps a state to a feasible action index.
pub trait Policy: Send + Sync {
    fn name(&self) -> String;

    /// Must return an index that is feasible under `mask`.
    fn choose(
        &self,
        state: &ExecutionState,
        model: &ProcessModel,
        mask: &ActionMask,
        rng: &mut RngStream,
    ) -> usize;

    fn act(&self, state: &ExecutionState, model: &ProcessModel, rng: &mut RngStream) -> Action {
        let mask = state.feasible_actions(model);
        Action::from_index(model, self.choose(state, model, &mask, rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    /// Shortest expected processing time among the feasible assignments.
    Spt,
    /// Oldest waiting instance first, served by its fastest free resource.
    Fifo,
    /// Uniform over the feasible assignments; postpones only when forced.
    Random,
    /// Bootstrap policy of the trainer; behaves exactly like SPT.
    Greedy,
}

impl FromStr for Heuristic {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spt" => Ok(Heuristic::Spt),
            "fifo" => Ok(Heuristic::Fifo),
            "random" => Ok(Heuristic::Random),
            "greedy" => Ok(Heuristic::Greedy),
            other => Err(format!("unknown heuristic `{other}`")),
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Heuristic::Spt => "spt",
            Heuristic::Fifo => "fifo",
            Heuristic::Random => "random",
            Heuristic::Greedy => "greedy",
        })
    }
}

fn fastest(model: &ProcessModel, mask: &ActionMask, candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let assignments = model.allowed_assignments();
    let mut best: Option<(usize, f64)> = None;
    for i in candidates.filter(|&i| mask.is_feasible(i)) {
        let (r, a) = assignments[i];
        let rate = model.rate(r, a).expect("eligible");
        // strictly faster only: ties keep the lowest index
        if best.is_none_or(|(_, b)| rate > b) {
            best = Some((i, rate));
        }
    }
    best.map(|(i, _)| i)
}

impl Policy for Heuristic {
    fn name(&self) -> String {
        self.to_string()
    }

    fn choose(
        &self,
        state: &ExecutionState,
        model: &ProcessModel,
        mask: &ActionMask,
        rng: &mut RngStream,
    ) -> usize {
        let postpone = model.postpone_index();
        let n = model.allowed_assignments().len();
        match self {
            Heuristic::Spt | Heuristic::Greedy => fastest(model, mask, 0..n).unwrap_or(postpone),
            Heuristic::Fifo => {
                let assignments = model.allowed_assignments();
                let oldest = (0..n)
                    .filter(|&i| mask.is_feasible(i))
                    .map(|i| assignments[i].1)
                    .min_by_key(|&a| state.queue(a).front().map(|inst| inst.case));
                match oldest {
                    Some(act) => fastest(model, mask, (0..n).filter(|&i| assignments[i].1 == act))
                        .unwrap_or(postpone),
                    None => postpone,
                }
            }
            Heuristic::Random => {
                let choices: Vec<usize> = (0..n).filter(|&i| mask.is_feasible(i)).collect();
                if choices.is_empty() {
                    postpone
                } else {
                    choices[rng.below(choices.len())]
                }
            }
        }
    }
}

/// Neural policy: argmax of the network over feasible actions.
///
/// Decisions are memoized per observation key. The observation and the mask
/// are both functions of that key, so the cache is exact.
pub struct NetPolicy {
    net: PolicyNet,
    cache: DashMap<Vec<u16>, u16>,
}

impl NetPolicy {
    pub fn new(net: PolicyNet) -> Self {
        NetPolicy {
            net,
            cache: DashMap::new(),
        }
    }

    pub fn net(&self) -> &PolicyNet {
        &self.net
    }

    pub fn into_net(self) -> PolicyNet {
        self.net
    }
}

impl Clone for NetPolicy {
    fn clone(&self) -> Self {
        NetPolicy::new(self.net.clone())
    }
}

impl fmt::Debug for NetPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetPolicy")
            .field("layers", &self.net.layer_sizes())
            .finish()
    }
}

/// Argmax over feasible actions of the network output; lowest index wins ties.
pub fn act_net(net: &PolicyNet, state: &ExecutionState, model: &ProcessModel) -> Action {
    let mask = state.feasible_actions(model);
    let obs = state.observe(model);
    Action::from_index(model, net.best_action(obs.as_slice(), &mask))
}

impl Policy for NetPolicy {
    fn name(&self) -> String {
        "net".into()
    }

    fn choose(
        &self,
        state: &ExecutionState,
        model: &ProcessModel,
        mask: &ActionMask,
        _rng: &mut RngStream,
    ) -> usize {
        if mask.forced_postpone() {
            return model.postpone_index();
        }
        let key = state.observation_key(QUEUE_CAP);
        if let Some(hit) = self.cache.get(&key) {
            return *hit as usize;
        }
        let obs = state.observe(model);
        let action = self.net.best_action(obs.as_slice(), mask);
        self.cache.insert(key, action as u16);
        action
    }
}

/// Either the bootstrap heuristic or a trained network.
#[derive(Clone, Debug)]
pub enum LearnedPolicy {
    Bootstrap(Heuristic),
    Net(NetPolicy),
}

impl LearnedPolicy {
    pub fn net(&self) -> Option<&PolicyNet> {
        match self {
            LearnedPolicy::Net(p) => Some(p.net()),
            LearnedPolicy::Bootstrap(_) => None,
        }
    }
}

impl Policy for LearnedPolicy {
    fn name(&self) -> String {
        match self {
            LearnedPolicy::Bootstrap(h) => h.name(),
            LearnedPolicy::Net(n) => n.name(),
        }
    }

    fn choose(
        &self,
        state: &ExecutionState,
        model: &ProcessModel,
        mask: &ActionMask,
        rng: &mut RngStream,
    ) -> usize {
        match self {
            LearnedPolicy::Bootstrap(h) => h.choose(state, model, mask, rng),
            LearnedPolicy::Net(n) => n.choose(state, model, mask, rng),
        }
    }
}
