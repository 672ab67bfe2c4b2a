//! Offline dataset data model, validation, `.ord` on-disk format, and
//! access-restriction slicing.
//!
//! The `.ord` format is line-oriented: a header line `ORD 1 {<meta JSON>}`
//! followed by one JSON object per trajectory. Floats are written with full
//! round-trip precision, so `load(save(d))` is bit-identical to `d`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic tag on the first line of an `.ord` file.
pub const FORMAT_TAG: &str = "ORD";
/// Current format version.
pub const FORMAT_VERSION: u32 = 1;

/// One environment step: `(s, a, r, s', terminal)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// An ordered episode of transitions with a dense integer id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Dataset-level metadata carried in the `.ord` header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Environment name the data was collected from.
    pub env: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Maximum trajectory length `L`; enforced at load time.
    pub max_length: usize,
    /// Discount factor the collector ran with.
    pub gamma: f64,
    /// Master seed of the collecting run.
    pub seed: u64,
    /// Set by attacks that rewrote transitions in place. Chain-consistency
    /// violations are downgraded to informational when this is set.
    #[serde(default)]
    pub poisoned: bool,
}

/// A pre-collected offline RL dataset: ordered trajectories plus metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl OfflineDataset {
    /// Total number of transitions across all trajectories.
    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// Flattened iterator over all transitions in trajectory order.
    pub fn iter_transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    /// Start offset of each trajectory in the flattened transition order.
    pub fn trajectory_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.trajectories.len());
        let mut acc = 0usize;
        for t in &self.trajectories {
            offsets.push(acc);
            acc += t.len();
        }
        offsets
    }

    /// Looks up a transition by its flattened index.
    pub fn transition_at(&self, global: usize) -> Option<&Transition> {
        let mut idx = global;
        for t in &self.trajectories {
            if idx < t.len() {
                return Some(&t.transitions[idx]);
            }
            idx -= t.len();
        }
        None
    }
}

/// A contiguous slice of the flattened transition sequence, modelling an
/// attacker whose data access is restricted to consecutive time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessWindow {
    pub start: usize,
    pub length: usize,
}

impl AccessWindow {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn contains(&self, global: usize) -> bool {
        global >= self.start && global < self.end()
    }
}

/// Severity of a validation finding. Chain breaks in poisoned datasets are
/// expected and reported as `Info`; everything else is an `Error`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Error,
    Info,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    pub trajectory: Option<u64>,
    pub step: Option<usize>,
    pub message: String,
}

/// Every invariant violation found in a dataset, with its location.
/// An empty report means the dataset is well-formed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    fn push(&mut self, severity: Severity, trajectory: Option<u64>, step: Option<usize>, message: String) {
        self.issues.push(ValidationIssue { severity, trajectory, step, message });
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported format version {found:?} (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("trajectory {id} has {len} transitions, exceeding declared max length {max}")]
    TooLong { id: u64, len: usize, max: usize },
    #[error("{0}")]
    Argument(String),
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Checks every dataset invariant and reports each violation with its
/// trajectory/step location. Never fails: violations are report entries.
pub fn validate(dataset: &OfflineDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let meta = &dataset.meta;
    let chain_severity = if meta.poisoned { Severity::Info } else { Severity::Error };

    if dataset.n_transitions() == 0 {
        report.push(Severity::Error, None, None, "dataset contains no transitions".to_string());
    }

    for (pos, traj) in dataset.trajectories.iter().enumerate() {
        if traj.id != pos as u64 {
            report.push(
                Severity::Error,
                Some(traj.id),
                None,
                format!("trajectory id {} at position {pos}: ids must be dense and ordered", traj.id),
            );
        }
        if traj.is_empty() {
            report.push(Severity::Error, Some(traj.id), None, "trajectory is empty".to_string());
            continue;
        }
        if traj.len() > meta.max_length {
            report.push(
                Severity::Error,
                Some(traj.id),
                None,
                format!("trajectory length {} exceeds declared max length {}", traj.len(), meta.max_length),
            );
        }

        for (step, tr) in traj.transitions.iter().enumerate() {
            if tr.state.len() != meta.state_dim {
                report.push(
                    Severity::Error,
                    Some(traj.id),
                    Some(step),
                    format!("state dimension {} != declared {}", tr.state.len(), meta.state_dim),
                );
            }
            if tr.next_state.len() != meta.state_dim {
                report.push(
                    Severity::Error,
                    Some(traj.id),
                    Some(step),
                    format!("next_state dimension {} != declared {}", tr.next_state.len(), meta.state_dim),
                );
            }
            if tr.action.len() != meta.action_dim {
                report.push(
                    Severity::Error,
                    Some(traj.id),
                    Some(step),
                    format!("action dimension {} != declared {}", tr.action.len(), meta.action_dim),
                );
            }
            if !all_finite(&tr.state)
                || !all_finite(&tr.action)
                || !all_finite(&tr.next_state)
                || !tr.reward.is_finite()
            {
                report.push(
                    Severity::Error,
                    Some(traj.id),
                    Some(step),
                    "non-finite component in transition".to_string(),
                );
            }
            if tr.terminal && step + 1 < traj.len() {
                report.push(
                    Severity::Error,
                    Some(traj.id),
                    Some(step),
                    "terminal transition does not end its trajectory".to_string(),
                );
            }
        }

        // Chaining: next_state of step t must equal state of step t+1 for
        // non-terminal interior steps.
        for step in 0..traj.len().saturating_sub(1) {
            let cur = &traj.transitions[step];
            let next = &traj.transitions[step + 1];
            if !cur.terminal && cur.next_state != next.state {
                report.push(
                    chain_severity,
                    Some(traj.id),
                    Some(step),
                    "next_state does not match the following step's state".to_string(),
                );
            }
        }
    }

    report
}

/// Writes `dataset` in the `.ord` format.
pub fn save(dataset: &OfflineDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let meta_json = serde_json::to_string(&dataset.meta)
        .map_err(|e| DatasetError::Argument(format!("meta not serializable: {e}")))?;
    writeln!(w, "{FORMAT_TAG} {FORMAT_VERSION} {meta_json}")?;
    for traj in &dataset.trajectories {
        let line = serde_json::to_string(traj)
            .map_err(|e| DatasetError::Argument(format!("trajectory {} not serializable: {e}", traj.id)))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `.ord` file. Fails on malformed lines (with the line number),
/// unknown versions, and trajectories exceeding the declared max length.
pub fn load(path: impl AsRef<Path>) -> Result<OfflineDataset, DatasetError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header = lines
        .next()
        .ok_or(DatasetError::Parse { line: 1, message: "empty file".to_string() })??;
    let mut parts = header.splitn(3, ' ');
    let tag = parts.next().unwrap_or("");
    if tag != FORMAT_TAG {
        return Err(DatasetError::Parse {
            line: 1,
            message: format!("expected header tag {FORMAT_TAG:?}, found {tag:?}"),
        });
    }
    let version_str = parts.next().unwrap_or("");
    let version: u32 = version_str.parse().map_err(|_| DatasetError::Parse {
        line: 1,
        message: format!("unparseable version field {version_str:?}"),
    })?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version { found: version_str.to_string(), expected: FORMAT_VERSION });
    }
    let meta_json = parts
        .next()
        .ok_or(DatasetError::Parse { line: 1, message: "missing meta object".to_string() })?;
    let meta: DatasetMeta = serde_json::from_str(meta_json)
        .map_err(|e| DatasetError::Parse { line: 1, message: format!("bad meta object: {e}") })?;

    let mut trajectories = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)
            .map_err(|e| DatasetError::Parse { line: line_no, message: e.to_string() })?;
        if traj.len() > meta.max_length {
            return Err(DatasetError::TooLong { id: traj.id, len: traj.len(), max: meta.max_length });
        }
        trajectories.push(traj);
    }

    Ok(OfflineDataset { meta, trajectories })
}

/// Draws a uniformly random contiguous window of `floor(fraction * N)`
/// transitions. Deterministic under a fixed seed.
pub fn restrict_access(
    dataset: &OfflineDataset,
    fraction: f64,
    seed: u64,
) -> Result<AccessWindow, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::Argument(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.n_transitions();
    let length = (fraction * n as f64).floor() as usize;
    if length < 1 {
        return Err(DatasetError::Argument(format!(
            "fraction {fraction} of {n} transitions yields an empty window"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..=n - length);
    Ok(AccessWindow { start, length })
}
