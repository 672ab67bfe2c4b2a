//! Finite MDPs: ground-truth model, policies, value iteration, exact
//! discounted occupancy, and empirical state-action distributions.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{sample_index, Agent, EnvError, Environment, Step};
use crate::coverage::{EmpiricalDist, OccupancyDist};
use crate::dataset::OfflineDataset;

/// A finite MDP with explicit transition and expected-reward tables.
/// Terminal states are absorbing (all actions self-loop with zero reward);
/// rollouts end on arrival at one. States and actions are exposed to the
/// generic interfaces as 1-element index-valued vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    /// transition[s][a][s'] — each row a probability vector.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// Expected immediate reward for taking a in s; rollouts emit this value.
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
    pub terminal: Vec<bool>,
    pub max_steps: usize,
}

fn check_prob_row(row: &[f64], what: &str) -> Result<(), EnvError> {
    if row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(EnvError::Argument(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(EnvError::Argument(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

impl TabularMDP {
    /// Checks every structural invariant; call after hand-construction.
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EnvError::Argument(format!("gamma {} outside (0,1)", self.gamma)));
        }
        if self.transition.len() != self.n_states
            || self.reward.len() != self.n_states
            || self.terminal.len() != self.n_states
            || self.initial_dist.len() != self.n_states
        {
            return Err(EnvError::Argument("table shapes disagree with n_states".to_string()));
        }
        for (s, per_action) in self.transition.iter().enumerate() {
            if per_action.len() != self.n_actions || self.reward[s].len() != self.n_actions {
                return Err(EnvError::Argument(format!("state {s}: tables disagree with n_actions")));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != self.n_states {
                    return Err(EnvError::Argument(format!("P[{s}][{a}] has wrong length")));
                }
                check_prob_row(row, &format!("P[{s}][{a}]"))?;
            }
        }
        check_prob_row(&self.initial_dist, "initial_dist")?;
        if self.max_steps == 0 {
            return Err(EnvError::Argument("max_steps must be >= 1".to_string()));
        }
        Ok(())
    }

    fn state_index(&self, state: &[f64]) -> usize {
        (state[0].round() as i64).clamp(0, self.n_states as i64 - 1) as usize
    }
}

impl Environment for TabularMDP {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![sample_index(&self.initial_dist, rng) as f64]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step {
        let s = self.state_index(state);
        let a = (action[0].round() as i64).clamp(0, self.n_actions as i64 - 1) as usize;
        let next = sample_index(&self.transition[s][a], rng);
        Step {
            next_state: vec![next as f64],
            reward: self.reward[s][a],
            terminal: self.terminal[next],
        }
    }
}

/// A stochastic policy over a finite MDP: probs[s][a].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self, EnvError> {
        for (s, row) in probs.iter().enumerate() {
            check_prob_row(row, &format!("pi[{s}]"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states] }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.first().map_or(0, |r| r.len())
    }
}

impl Agent for TabularPolicy {
    fn act(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let s = (state[0].round() as i64).clamp(0, self.probs.len() as i64 - 1) as usize;
        vec![sample_index(&self.probs[s], rng) as f64]
    }
}

/// Solves the Bellman optimality equations on the true model by synchronous
/// sweeps. Used to build near-optimal behavior and target policies.
pub fn value_iteration(mdp: &TabularMDP, tol: f64, max_iters: usize) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    for _ in 0..max_iters {
        let mut next_q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
        let mut shift: f64 = 0.0;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let mut backup = mdp.reward[s][a];
                if !mdp.terminal[s] {
                    for (s2, p) in mdp.transition[s][a].iter().enumerate() {
                        if *p > 0.0 {
                            let v = q[s2].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            backup += mdp.gamma * p * v;
                        }
                    }
                }
                shift = shift.max((backup - q[s][a]).abs());
                next_q[s][a] = backup;
            }
        }
        q = next_q;
        if shift < tol {
            break;
        }
    }
    q
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Deterministic policy taking the highest-Q action (ties → lowest index).
pub fn greedy_policy(q: &[Vec<f64>]) -> TabularPolicy {
    let probs = q
        .iter()
        .map(|row| {
            let mut p = vec![0.0; row.len()];
            p[argmax_lowest(row)] = 1.0;
            p
        })
        .collect();
    TabularPolicy { probs }
}

/// Greedy policy mixed with uniform exploration: the behavior policy used
/// for data collection.
pub fn epsilon_greedy_policy(q: &[Vec<f64>], epsilon: f64) -> Result<TabularPolicy, EnvError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(EnvError::Argument(format!("epsilon {epsilon} outside [0,1]")));
    }
    let probs = q
        .iter()
        .map(|row| {
            let n = row.len();
            let mut p = vec![epsilon / n as f64; n];
            p[argmax_lowest(row)] += 1.0 - epsilon;
            p
        })
        .collect();
    TabularPolicy::new(probs)
}

fn solve_linear(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Vec<f64>, EnvError> {
    crate::linalg::solve_linear(a, b).map_err(EnvError::Numeric)
}

/// Computes the discounted state-action occupancy
/// d(s,a) = (1−γ)·Σ_t γ^t·Pr(s_t=s, a_t=a) by solving the state balance
/// system (I − γ·P_π^T)·x = (1−γ)·ρ0 and combining with the policy.
pub fn exact_occupancy(mdp: &TabularMDP, policy: &TabularPolicy) -> Result<OccupancyDist, EnvError> {
    mdp.validate()?;
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(EnvError::Argument("policy shape disagrees with mdp".to_string()));
    }
    let n = mdp.n_states;
    let gamma = mdp.gamma;

    // p_pi[s][s2] = Σ_a π(a|s)·P[s][a][s2]
    let mut p_pi = vec![vec![0.0; n]; n];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let pa = policy.probs[s][a];
            if pa == 0.0 {
                continue;
            }
            for s2 in 0..n {
                p_pi[s][s2] += pa * mdp.transition[s][a][s2];
            }
        }
    }

    // System matrix I − γ·P_π^T.
    let mut a_mat = vec![vec![0.0; n]; n];
    for s in 0..n {
        for s2 in 0..n {
            a_mat[s][s2] = if s == s2 { 1.0 } else { 0.0 } - gamma * p_pi[s2][s];
        }
    }
    let b: Vec<f64> = mdp.initial_dist.iter().map(|p| (1.0 - gamma) * p).collect();
    let x = solve_linear(a_mat.clone(), b.clone())?;

    let mut residual: f64 = 0.0;
    for s in 0..n {
        let mut lhs = 0.0;
        for s2 in 0..n {
            lhs += a_mat[s][s2] * x[s2];
        }
        residual = residual.max((lhs - b[s]).abs());
    }
    if residual >= 1e-10 {
        return Err(EnvError::Numeric(format!("occupancy solve residual {residual}")));
    }

    let d: Vec<Vec<f64>> = (0..n)
        .map(|s| (0..mdp.n_actions).map(|a| x[s] * policy.probs[s][a]).collect())
        .collect();
    let total: f64 = d.iter().flatten().sum();
    if (total - 1.0).abs() >= 1e-8 {
        return Err(EnvError::Numeric(format!("occupancy sums to {total}")));
    }
    Ok(OccupancyDist { d, gamma })
}

/// Counts dataset (s,a) pairs against the MDP's index ranges. Counts are
/// kept as integers so the distribution normalizes exactly.
pub fn empirical_distribution(
    dataset: &OfflineDataset,
    mdp: &TabularMDP,
) -> Result<EmpiricalDist, EnvError> {
    if dataset.n_transitions() == 0 {
        return Err(EnvError::Argument("empty dataset".to_string()));
    }
    let mut counts = vec![vec![0u64; mdp.n_actions]; mdp.n_states];
    for tr in dataset.iter_transitions() {
        let s = index_value(&tr.state, mdp.n_states, "state")?;
        let a = index_value(&tr.action, mdp.n_actions, "action")?;
        counts[s][a] += 1;
    }
    Ok(EmpiricalDist::from_counts(counts))
}

fn index_value(v: &[f64], range: usize, what: &str) -> Result<usize, EnvError> {
    if v.len() != 1 {
        return Err(EnvError::Argument(format!("{what} is not scalar-indexed")));
    }
    let x = v[0];
    if x.fract() != 0.0 || x < 0.0 || x >= range as f64 {
        return Err(EnvError::Argument(format!("{what} value {x} is not an index in [0,{range})")));
    }
    Ok(x as usize)
}
