//! Reward functions.
//!
//! The dense reward charges every transition with the cycle time it adds:
//! `-|C| * dt`, with `|C|` counted before the event of the transition. Summed
//! over an episode that starts and ends empty it equals minus the total cycle
//! time. The three completion-triggered rewards are kept for comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::StepOutcome;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("negative transition time {0}")]
    NegativeDt(f64),
    #[error("negative cycle time {0}")]
    NegativeCycleTime(f64),
    #[error("unknown reward `{0}` (expected a, b, c or d)")]
    Unknown(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// (a) +1 per completed case.
    PerCompletion,
    /// (b) minus the cycle time of each completed case.
    NegativeCycleTime,
    /// (c) 1 / (1 + cycle time) per completed case.
    InverseCycleTime,
    /// (d) minus active cases times elapsed time.
    DenseActiveCases,
}

impl FromStr for RewardKind {
    type Err = RewardError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" => Ok(RewardKind::PerCompletion),
            "b" => Ok(RewardKind::NegativeCycleTime),
            "c" => Ok(RewardKind::InverseCycleTime),
            "d" => Ok(RewardKind::DenseActiveCases),
            other => Err(RewardError::Unknown(other.to_string())),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardKind::PerCompletion => "a",
            RewardKind::NegativeCycleTime => "b",
            RewardKind::InverseCycleTime => "c",
            RewardKind::DenseActiveCases => "d",
        })
    }
}

/// One transition as seen by a reward function.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transition {
    pub active_cases: usize,
    pub dt: f64,
    pub cycle_times: Vec<f64>,
}

impl From<&StepOutcome> for Transition {
    fn from(out: &StepOutcome) -> Self {
        Transition {
            active_cases: out.active_cases,
            dt: out.dt,
            cycle_times: out.completions.iter().map(|c| c.cycle_time).collect(),
        }
    }
}

pub fn step_reward(
    kind: RewardKind,
    active_cases: usize,
    dt: f64,
    cycle_times: &[f64],
) -> Result<f64, RewardError> {
    if dt < 0.0 {
        return Err(RewardError::NegativeDt(dt));
    }
    if let Some(&ct) = cycle_times.iter().find(|ct| **ct < 0.0) {
        return Err(RewardError::NegativeCycleTime(ct));
    }
    Ok(match kind {
        RewardKind::DenseActiveCases => -(active_cases as f64) * dt,
        RewardKind::PerCompletion => cycle_times.len() as f64,
        RewardKind::NegativeCycleTime => -cycle_times.iter().sum::<f64>(),
        RewardKind::InverseCycleTime => cycle_times.iter().map(|ct| 1.0 / (1.0 + ct)).sum(),
    })
}

/// Dense reward of a simulator step; infallible because the simulator never
/// produces negative times.
#[inline]
pub fn dense(out: &StepOutcome) -> f64 {
    -(out.active_cases as f64) * out.dt
}

/// Undiscounted sum of step rewards.
pub fn episode_return(kind: RewardKind, trajectory: &[Transition]) -> Result<f64, RewardError> {
    trajectory
        .iter()
        .map(|t| step_reward(kind, t.active_cases, t.dt, &t.cycle_times))
        .sum()
}
