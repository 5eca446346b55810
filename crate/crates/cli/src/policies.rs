//! Policy references on the command line: `spt`, `fifo`, `random`, `greedy`,
//! `net:<path>` and `optimal:<path>`, each optionally prefixed by
//! `<label>=` to name the row.

use std::fs;
use std::path::{Path, PathBuf};

use procalloc::mdp::OptimalPolicy;
use procalloc::policy::{self, Heuristic, NetPolicy, Policy};
use procalloc::ProcessModel;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Stand-in for a policy file when the exported policy is a heuristic
/// (for example the bootstrap policy of a run without accepted iterations).
#[derive(Debug, Serialize, Deserialize)]
pub struct HeuristicFile {
    pub heuristic: Heuristic,
    pub model_name: String,
    pub layout_hash: String,
}

pub struct ResolvedPolicy {
    pub label: String,
    pub policy: Box<dyn Policy>,
    pub file: Option<PathBuf>,
    pub optimal: bool,
}

fn parse_heuristic(s: &str) -> Option<Heuristic> {
    s.parse().ok()
}

fn load_net_or_heuristic(path: &Path, model: &ProcessModel) -> Result<Box<dyn Policy>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("policy file {}: {e}", path.display())))?;
    if let Ok(file) = serde_json::from_slice::<HeuristicFile>(&bytes) {
        if file.layout_hash != model.layout_hash() {
            return Err(CliError::Config(format!(
                "policy file {} was written for model `{}` with a different layout",
                path.display(),
                file.model_name
            )));
        }
        return Ok(Box::new(file.heuristic));
    }
    let stored = policy::load_policy(path, model)?;
    Ok(Box::new(NetPolicy::new(stored.net)))
}

pub fn resolve(reference: &str, model: &ProcessModel) -> Result<ResolvedPolicy, CliError> {
    let (label, spec) = match reference.split_once('=') {
        Some((l, s)) if !l.is_empty() && !l.contains(':') => (Some(l.to_string()), s),
        _ => (None, reference),
    };
    let resolved = if let Some(h) = parse_heuristic(spec) {
        ResolvedPolicy {
            label: h.to_string(),
            policy: Box::new(h),
            file: None,
            optimal: false,
        }
    } else if let Some(path) = spec.strip_prefix("net:") {
        ResolvedPolicy {
            label: "learned".into(),
            policy: load_net_or_heuristic(Path::new(path), model)?,
            file: Some(path.into()),
            optimal: false,
        }
    } else if let Some(path) = spec.strip_prefix("optimal:") {
        ResolvedPolicy {
            label: "optimal".into(),
            policy: Box::new(OptimalPolicy::load(Path::new(path), model)?),
            file: Some(path.into()),
            optimal: true,
        }
    } else {
        return Err(CliError::Config(format!(
            "unknown policy `{reference}` (expected spt, fifo, random, greedy, net:<path> or optimal:<path>)"
        )));
    };
    Ok(ResolvedPolicy {
        label: label.unwrap_or(resolved.label),
        ..resolved
    })
}

/// Resolves a list, suffixing repeated labels with `-2`, `-3`, ...
pub fn resolve_all(references: &[String], model: &ProcessModel) -> Result<Vec<ResolvedPolicy>, CliError> {
    let mut out: Vec<ResolvedPolicy> = Vec::with_capacity(references.len());
    for r in references {
        let mut p = resolve(r, model)?;
        let base = p.label.clone();
        let mut n = 1;
        while out.iter().any(|q| q.label == p.label) {
            n += 1;
            p.label = format!("{base}-{n}");
        }
        out.push(p);
    }
    Ok(out)
}
