//! Run manifests: everything needed to repeat a run, plus content hashes of
//! its inputs and outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use procalloc::eval::{Dynamics, EvalConfig};
use procalloc::model::ModelDecl;
use procalloc::rollout::RolloutConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveJob {
    pub bound: usize,
    pub kappa: f64,
    pub max_states: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub overflow_penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareJob {
    /// Policy references as given on the command line.
    pub policies: Vec<String>,
    /// Row label of the reference; by default the optimal policy if one is
    /// listed, else the first policy.
    pub reference: Option<String>,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateJob {
    pub policy: String,
    pub cases: u64,
    pub seed: u64,
    pub dynamics: Dynamics,
    pub emit_log: bool,
}

/// Fully resolved settings of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Train(RolloutConfig),
    Solve(SolveJob),
    Compare(CompareJob),
    Simulate(SimulateJob),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Train(_) => "train",
            Job::Solve(_) => "solve",
            Job::Compare(_) => "compare",
            Job::Simulate(_) => "simulate",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Train(c) => Some(c.seed),
            Job::Solve(_) => None,
            Job::Compare(c) => Some(c.eval.seed),
            Job::Simulate(s) => Some(s.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    /// The `--scenario` / `--compose` arguments as given.
    pub source: String,
    pub fingerprint: String,
    pub layout_hash: String,
    pub model: ModelDecl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    /// Outputs that carry wall-clock values are not expected to reproduce.
    #[serde(default = "yes")]
    pub reproducible: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub job: Job,
    pub scenario: ScenarioRecord,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Seconds since the Unix epoch at start.
    pub started_at: u64,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path, reproducible: bool) -> Result<FileDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
        reproducible,
    })
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(CliError::Config(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    /// Checks that every recorded input still has the recorded content.
    pub fn verify_inputs(&self) -> Result<(), CliError> {
        for input in &self.inputs {
            let now = digest_file(&input.path, true)?;
            if now.sha256 != input.sha256 {
                return Err(CliError::Config(format!(
                    "input {} changed since the manifest was written",
                    input.path.display()
                )));
            }
        }
        Ok(())
    }
}
