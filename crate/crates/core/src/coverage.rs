//! Coverage analysis: single-step and sequence-level concentrability
//! coefficients plus the derived Q-error bounds.
//!
//! The sequence coefficient is the supremum over length-l state-action
//! sequences with positive behavior probability of the ratio of target to
//! behavior sequence probability. Shared transition dynamics cancel, so the
//! ratio reduces to the product of per-step action-probability ratios; we
//! exploit that analytically instead of estimating dynamics from data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::OfflineDataset;
use crate::envs::{empirical_distribution, exact_occupancy, EnvError, TabularMDP, TabularPolicy};
use crate::patterns::PatternIndex;

/// Discounted state-action visitation distribution d(s,a).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyDist {
    pub d: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl OccupancyDist {
    pub fn total(&self) -> f64 {
        self.d.iter().flatten().sum()
    }
}

/// Empirical state-action distribution held as integer counts so that
/// normalization is exact at the rational level (Σ counts == total).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDist {
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
}

impl EmpiricalDist {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let total = counts.iter().flatten().sum();
        Self { counts, total }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.counts[s][a] as f64 / self.total as f64
    }

    pub fn in_support(&self, s: usize, a: usize) -> bool {
        self.counts[s][a] > 0
    }

    /// Materializes the probability table.
    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| row.iter().map(|c| *c as f64 / self.total as f64).collect())
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum CoverageError {
    #[error("{0}")]
    Argument(String),
    #[error("enumeration exceeded cap of {cap} sequence expansions at l={l}; use the Monte Carlo estimator instead")]
    Resource { l: usize, cap: u64 },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// The behavior side of a coverage query: an explicit policy or a dataset
/// whose conditional action frequencies stand in for one.
#[derive(Debug, Clone, Copy)]
pub enum Behavior<'a> {
    Policy(&'a TabularPolicy),
    Dataset(&'a OfflineDataset),
}

impl Behavior<'_> {
    /// mu(a|s) table; rows of states never observed are all zero and such
    /// states support no sequences.
    pub fn conditional(&self, n_states: usize, n_actions: usize) -> Result<Vec<Vec<f64>>, CoverageError> {
        match self {
            Behavior::Policy(p) => {
                if p.n_states() != n_states || p.n_actions() != n_actions {
                    return Err(CoverageError::Argument("behavior policy shape mismatch".to_string()));
                }
                Ok(p.probs.clone())
            }
            Behavior::Dataset(d) => {
                let mut counts = vec![vec![0u64; n_actions]; n_states];
                for tr in d.iter_transitions() {
                    let s = tr.state[0];
                    let a = tr.action[0];
                    if s.fract() != 0.0 || a.fract() != 0.0 || s < 0.0 || a < 0.0
                        || s >= n_states as f64 || a >= n_actions as f64
                    {
                        return Err(CoverageError::Argument(format!(
                            "dataset pair ({s},{a}) is not index-valued within ranges"
                        )));
                    }
                    counts[s as usize][a as usize] += 1;
                }
                Ok(counts
                    .iter()
                    .map(|row| {
                        let n: u64 = row.iter().sum();
                        if n == 0 {
                            vec![0.0; n_actions]
                        } else {
                            row.iter().map(|c| *c as f64 / n as f64).collect()
                        }
                    })
                    .collect())
            }
        }
    }

    /// States that can appear as a window start under this behavior: for a
    /// policy, everything graph-reachable from the initial support; for a
    /// dataset, every state observed with an action.
    pub fn start_states(&self, mdp: &TabularMDP) -> Result<Vec<bool>, CoverageError> {
        let cond = self.conditional(mdp.n_states, mdp.n_actions)?;
        match self {
            Behavior::Policy(_) => {
                let mut reach = vec![false; mdp.n_states];
                let mut queue: Vec<usize> = (0..mdp.n_states)
                    .filter(|s| mdp.initial_dist[*s] > 0.0)
                    .collect();
                for s in &queue {
                    reach[*s] = true;
                }
                while let Some(s) = queue.pop() {
                    for a in 0..mdp.n_actions {
                        if cond[s][a] == 0.0 {
                            continue;
                        }
                        for (s2, p) in mdp.transition[s][a].iter().enumerate() {
                            if *p > 0.0 && !reach[s2] {
                                reach[s2] = true;
                                queue.push(s2);
                            }
                        }
                    }
                }
                Ok(reach)
            }
            Behavior::Dataset(_) => Ok(cond.iter().map(|row| row.iter().any(|p| *p > 0.0)).collect()),
        }
    }

    /// Joint mu(s,a) table for the single-step coefficient.
    pub fn joint(&self, mdp: &TabularMDP) -> Result<Vec<Vec<f64>>, CoverageError> {
        match self {
            Behavior::Policy(p) => Ok(exact_occupancy(mdp, p)?.d),
            Behavior::Dataset(d) => Ok(empirical_distribution(d, mdp)?.probs()),
        }
    }
}

fn sup_ratio(d: &[Vec<f64>], mu: &[Vec<f64>]) -> Result<(f64, f64), CoverageError> {
    let mut sup: Option<f64> = None;
    let mut uncovered = 0.0;
    for (dr, mr) in d.iter().zip(mu.iter()) {
        for (dv, mv) in dr.iter().zip(mr.iter()) {
            if *mv > 0.0 {
                let r = dv / mv;
                sup = Some(sup.map_or(r, |s: f64| s.max(r)));
            } else {
                uncovered += dv;
            }
        }
    }
    match sup {
        Some(c) => Ok((c, uncovered)),
        None => Err(CoverageError::Argument("behavior support is empty".to_string())),
    }
}

/// Worst-case single-step density ratio over the behavior support, plus the
/// target occupancy mass falling entirely outside that support.
pub fn single_step_concentrability(
    d: &OccupancyDist,
    mu: &EmpiricalDist,
) -> Result<(f64, f64), CoverageError> {
    if mu.total == 0 {
        return Err(CoverageError::Argument("empirical distribution is empty".to_string()));
    }
    sup_ratio(&d.d, &mu.probs())
}

/// Per-step action-probability ratio bound. `c_a` is None when the target
/// policy puts mass on actions outside the behavior support (the bound is
/// then infinite and `unsupported_target_mass` says how much).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBound {
    pub c_a: Option<f64>,
    pub infinite: bool,
    pub unsupported_target_mass: f64,
}

pub fn per_step_ratio_bound(
    target: &TabularPolicy,
    behavior: Behavior,
) -> Result<RatioBound, CoverageError> {
    let cond = behavior.conditional(target.n_states(), target.n_actions())?;
    let mut c_a: f64 = 0.0;
    let mut unsupported = 0.0;
    for (pr, mr) in target.probs.iter().zip(cond.iter()) {
        for (pv, mv) in pr.iter().zip(mr.iter()) {
            if *mv > 0.0 {
                c_a = c_a.max(pv / mv);
            } else {
                unsupported += pv;
            }
        }
    }
    let infinite = unsupported > 0.0;
    Ok(RatioBound {
        c_a: if infinite { None } else { Some(c_a) },
        infinite,
        unsupported_target_mass: unsupported,
    })
}

/// How a sequence coefficient was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SeqMode {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqEstimate {
    pub c_tau: f64,
    pub mode: SeqMode,
    /// Sequences inspected: all of them for Exact, samples for MonteCarlo.
    pub sequences: u64,
}

pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Exact sequence-level concentrability by depth-first enumeration of every
/// length-l sequence with positive behavior probability. The per-branch
/// expansion count is capped; exceeding it is a loud resource error.
pub fn sequence_concentrability(
    mdp: &TabularMDP,
    target: &TabularPolicy,
    behavior: Behavior,
    l: usize,
    cap: u64,
) -> Result<SeqEstimate, CoverageError> {
    if l < 1 {
        return Err(CoverageError::Argument("sequence length must be >= 1".to_string()));
    }
    if target.n_states() != mdp.n_states || target.n_actions() != mdp.n_actions {
        return Err(CoverageError::Argument("target policy shape mismatch".to_string()));
    }
    let cond = behavior.conditional(mdp.n_states, mdp.n_actions)?;
    let starts = behavior.start_states(mdp)?;

    struct Dfs<'a> {
        mdp: &'a TabularMDP,
        target: &'a [Vec<f64>],
        cond: &'a [Vec<f64>],
        l: usize,
        cap: u64,
        expansions: u64,
        completed: u64,
        sup: Option<f64>,
    }

    impl Dfs<'_> {
        fn visit(&mut self, s: usize, depth: usize, ratio: f64) -> Result<(), CoverageError> {
            self.expansions += 1;
            if self.expansions > self.cap {
                return Err(CoverageError::Resource { l: self.l, cap: self.cap });
            }
            for a in 0..self.mdp.n_actions {
                let mu = self.cond[s][a];
                if mu == 0.0 {
                    continue;
                }
                let r = ratio * self.target[s][a] / mu;
                if depth + 1 == self.l {
                    self.completed += 1;
                    self.sup = Some(self.sup.map_or(r, |x: f64| x.max(r)));
                    continue;
                }
                for (s2, p) in self.mdp.transition[s][a].iter().enumerate() {
                    if *p > 0.0 {
                        self.visit(s2, depth + 1, r)?;
                    }
                }
            }
            Ok(())
        }
    }

    let mut dfs = Dfs {
        mdp,
        target: &target.probs,
        cond: &cond,
        l,
        cap,
        expansions: 0,
        completed: 0,
        sup: None,
    };
    for s in 0..mdp.n_states {
        if starts[s] {
            dfs.visit(s, 0, 1.0)?;
        }
    }
    match dfs.sup {
        Some(c_tau) if c_tau.is_finite() => Ok(SeqEstimate {
            c_tau,
            mode: SeqMode::Exact,
            sequences: dfs.completed,
        }),
        Some(c_tau) => Err(CoverageError::Numeric(format!("non-finite coefficient {c_tau}"))),
        None => Err(CoverageError::Argument(
            "no length-l sequence has positive behavior probability".to_string(),
        )),
    }
}

/// Monte Carlo lower estimate of the sequence coefficient: slides windows
/// over behavior trajectories (fresh rollouts for a policy, the dataset
/// itself for dataset behavior) and maximizes the per-window ratio.
pub fn sequence_concentrability_mc(
    mdp: &TabularMDP,
    target: &TabularPolicy,
    behavior: Behavior,
    l: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<SeqEstimate, CoverageError> {
    if l < 1 {
        return Err(CoverageError::Argument("sequence length must be >= 1".to_string()));
    }
    let cond = behavior.conditional(mdp.n_states, mdp.n_actions)?;
    let owned;
    let data: &OfflineDataset = match behavior {
        Behavior::Dataset(d) => d,
        Behavior::Policy(p) => {
            if n_rollouts == 0 {
                return Err(CoverageError::Argument("n_rollouts must be >= 1".to_string()));
            }
            owned = crate::envs::rollout(mdp, p, n_rollouts, seed)?;
            &owned
        }
    };

    let mut sup: Option<f64> = None;
    let mut windows = 0u64;
    for traj in &data.trajectories {
        if traj.len() < l {
            continue;
        }
        for start in 0..=traj.len() - l {
            let mut ratio = 1.0;
            let mut valid = true;
            for tr in &traj.transitions[start..start + l] {
                let s = tr.state[0] as usize;
                let a = tr.action[0] as usize;
                if cond[s][a] == 0.0 {
                    valid = false;
                    break;
                }
                ratio *= target.probs[s][a] / cond[s][a];
            }
            if valid {
                windows += 1;
                sup = Some(sup.map_or(ratio, |x: f64| x.max(ratio)));
            }
        }
    }
    match sup {
        Some(c_tau) => Ok(SeqEstimate { c_tau, mode: SeqMode::MonteCarlo, sequences: windows }),
        None => Err(CoverageError::Argument("no window of the requested length observed".to_string())),
    }
}

/// 2·R_max·C·ε/(1−γ): worst-case Q-estimation error implied by a
/// concentrability coefficient.
pub fn q_error_bound(r_max: f64, c: f64, gamma: f64, epsilon: f64) -> Result<f64, CoverageError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CoverageError::Argument(format!("gamma {gamma} outside (0,1)")));
    }
    if r_max < 0.0 || c < 0.0 || epsilon < 0.0 {
        return Err(CoverageError::Argument("bound inputs must be >= 0".to_string()));
    }
    Ok(2.0 * r_max * c * epsilon / (1.0 - gamma))
}

/// Per-length row of a coverage report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthEntry {
    pub l: usize,
    pub c_tau: f64,
    pub mode: SeqMode,
    pub sequences: u64,
    /// c_a^l when the per-step bound is finite and the power representable.
    pub cap_value: Option<f64>,
    /// Q-error bound evaluated at this c_tau.
    pub seq_q_bound: f64,
}

/// Full coverage analysis for one (mdp, target, behavior) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub c: f64,
    pub uncovered_mass: f64,
    pub c_a: Option<f64>,
    pub c_a_infinite: bool,
    pub per_length: Vec<LengthEntry>,
    pub r_max: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub single_step_q_bound: f64,
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Runs the full tabular analysis: single-step coefficient, per-step bound,
/// and the sequence coefficient for each requested length (falling back to
/// Monte Carlo when enumeration blows past the cap).
pub fn analyze_tabular(
    mdp: &TabularMDP,
    target: &TabularPolicy,
    behavior: Behavior,
    lengths: &[usize],
    r_max: f64,
    epsilon: f64,
    cap: u64,
    mc_seed: u64,
) -> Result<CoverageReport, CoverageError> {
    let d = exact_occupancy(mdp, target)?;
    let mu = behavior.joint(mdp)?;
    let (c, uncovered_mass) = sup_ratio(&d.d, &mu)?;
    let bound = per_step_ratio_bound(target, behavior)?;
    let single_step_q_bound = q_error_bound(r_max, c, mdp.gamma, epsilon)?;

    let mut per_length = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let est = match sequence_concentrability(mdp, target, behavior, l, cap) {
            Ok(est) => est,
            Err(CoverageError::Resource { .. }) => {
                sequence_concentrability_mc(mdp, target, behavior, l, 200, mc_seed)?
            }
            Err(e) => return Err(e),
        };
        let cap_value = bound.c_a.and_then(|ca| finite_or_none(ca.powi(l as i32)));
        per_length.push(LengthEntry {
            l,
            c_tau: est.c_tau,
            mode: est.mode,
            sequences: est.sequences,
            cap_value,
            seq_q_bound: q_error_bound(r_max, est.c_tau, mdp.gamma, epsilon)?,
        });
    }

    Ok(CoverageReport {
        c,
        uncovered_mass,
        c_a: bound.c_a,
        c_a_infinite: bound.infinite,
        per_length,
        r_max,
        epsilon,
        gamma: mdp.gamma,
        single_step_q_bound,
    })
}

impl CoverageReport {
    /// One CSV row per length for plotting the amplification curve.
    pub fn per_length_csv(&self) -> String {
        let mut out = String::from("l,c_tau,mode,sequences,cap_value,seq_q_bound\n");
        for e in &self.per_length {
            let mode = match e.mode {
                SeqMode::Exact => "exact",
                SeqMode::MonteCarlo => "monte_carlo",
            };
            let cap = e.cap_value.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.l, e.c_tau, mode, e.sequences, cap, e.seq_q_bound
            ));
        }
        out
    }
}

/// Frequency-based coverage summary for continuous data, where exact
/// densities are unavailable. Explicitly labeled a proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyCoverage {
    pub label: String,
    pub distinct_patterns: usize,
    pub total_windows: u64,
    pub min_count: u64,
    pub max_count: u64,
    pub min_frequency: f64,
}

pub fn pattern_frequency_proxy(index: &PatternIndex) -> Result<ProxyCoverage, CoverageError> {
    if index.total_windows() == 0 {
        return Err(CoverageError::Argument("pattern index is empty".to_string()));
    }
    let counts: Vec<u64> = index.iter().map(|(_, entry)| entry.count).collect();
    let min_count = *counts.iter().min().unwrap();
    let max_count = *counts.iter().max().unwrap();
    Ok(ProxyCoverage {
        label: "proxy".to_string(),
        distinct_patterns: counts.len(),
        total_windows: index.total_windows(),
        min_count,
        max_count,
        min_frequency: min_count as f64 / index.total_windows() as f64,
    })
}
