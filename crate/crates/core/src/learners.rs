//! Desk-scale offline learners: fitted Q-iteration, a conservative variant
//! that penalizes actions unobserved at a state, and behavioral cloning,
//! plus policy evaluation in the true environment.
//!
//! Tabular learners round states and actions to the nearest valid index, so
//! perturbed index-valued data trains the cell the perturbation lands on —
//! exactly the corruption channel a data-level attack exploits. Continuous
//! data uses per-action-bin linear heads over standardized state features.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::OfflineDataset;
use crate::envs::{Agent, Environment, TabularPolicy};
use crate::linalg::solve_linear;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("{0}")]
    Argument(String),
    #[error("{0}")]
    State(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Model family and its shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Tabular { n_states: usize, n_actions: usize },
    /// Per-action-dimension bin centers; the discrete action set is their
    /// Cartesian product.
    Linear { action_bins: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Damping on the Bellman update: new = (1−lr)·old + lr·backup.
    /// 1.0 is the classic full backup; the fixed point is unaffected.
    pub learning_rate: f64,
    pub gamma: f64,
    /// Conservative penalty weight; ignored by plain FQI.
    pub alpha: f64,
    /// Echoed into the model for config hashing; training itself is a
    /// deterministic full-batch sweep.
    pub seed: u64,
    pub model: ModelSpec,
}

impl TrainConfig {
    pub fn tabular(n_states: usize, n_actions: usize, gamma: f64) -> Self {
        Self {
            iterations: 200,
            learning_rate: 1.0,
            gamma,
            alpha: 0.0,
            seed: 0,
            model: ModelSpec::Tabular { n_states, n_actions },
        }
    }

    pub fn linear(action_bins: Vec<Vec<f64>>, gamma: f64) -> Self {
        Self {
            iterations: 60,
            learning_rate: 1.0,
            gamma,
            alpha: 0.0,
            seed: 0,
            model: ModelSpec::Linear { action_bins },
        }
    }

    fn check(&self, dataset: &OfflineDataset) -> Result<(), LearnerError> {
        if dataset.n_transitions() == 0 {
            return Err(LearnerError::Argument("empty dataset".to_string()));
        }
        if self.iterations < 1 {
            return Err(LearnerError::Argument("iterations must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(LearnerError::Argument(format!(
                "learning_rate {} outside (0,1]",
                self.learning_rate
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(LearnerError::Argument(format!("gamma {} outside (0,1)", self.gamma)));
        }
        if (self.gamma - dataset.meta.gamma).abs() > 1e-12 {
            return Err(LearnerError::Argument(format!(
                "config gamma {} does not match dataset gamma {}",
                self.gamma, dataset.meta.gamma
            )));
        }
        if self.alpha < 0.0 {
            return Err(LearnerError::Argument("alpha must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Minimal interface for probing a value function pointwise, e.g. to
/// measure per-dimension sensitivities.
pub trait StateActionValue {
    fn is_trained(&self) -> bool {
        true
    }
    fn value(&self, state: &[f64], action: &[f64]) -> f64;
}

/// A (possibly trained) action-value function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub repr: QRepr,
    pub trained: bool,
    pub config: TrainConfig,
}

impl StateActionValue for QFunction {
    fn is_trained(&self) -> bool {
        self.trained
    }

    fn value(&self, state: &[f64], action: &[f64]) -> f64 {
        QFunction::value(self, state, action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QRepr {
    Tabular {
        q: Vec<Vec<f64>>,
    },
    Linear {
        means: Vec<f64>,
        scales: Vec<f64>,
        /// One action vector per head, in head order.
        action_combos: Vec<Vec<f64>>,
        /// One weight vector per head over [standardized state; 1].
        heads: Vec<Vec<f64>>,
    },
}

fn round_index(x: f64, range: usize) -> usize {
    (x.round() as i64).clamp(0, range as i64 - 1) as usize
}

fn state_features(state: &[f64], means: &[f64], scales: &[f64]) -> Vec<f64> {
    let mut f: Vec<f64> = state
        .iter()
        .zip(means.iter().zip(scales.iter()))
        .map(|(x, (m, s))| (x - m) / s)
        .collect();
    f.push(1.0);
    f
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Cartesian product of per-dimension bin values, mixed-radix order.
fn expand_combos(action_bins: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut combos: Vec<Vec<f64>> = vec![Vec::new()];
    for bins in action_bins {
        let mut next = Vec::with_capacity(combos.len() * bins.len());
        for c in &combos {
            for v in bins {
                let mut c2 = c.clone();
                c2.push(*v);
                next.push(c2);
            }
        }
        combos = next;
    }
    combos
}

/// Index of the combo nearest to `action` (per-dimension nearest bin).
fn combo_index(action_bins: &[Vec<f64>], action: &[f64]) -> usize {
    let mut idx = 0;
    for (bins, x) in action_bins.iter().zip(action.iter()) {
        let mut best = 0;
        let mut best_d = (bins[0] - x).abs();
        for (i, b) in bins.iter().enumerate().skip(1) {
            let d = (b - x).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        idx = idx * bins.len() + best;
    }
    idx
}

impl QFunction {
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn value(&self, state: &[f64], action: &[f64]) -> f64 {
        match &self.repr {
            QRepr::Tabular { q } => {
                let s = round_index(state[0], q.len());
                let a = round_index(action[0], q[0].len());
                q[s][a]
            }
            QRepr::Linear { means, scales, action_combos, heads } => {
                // Nearest combo in Euclidean distance; on a product grid this
                // coincides with per-dimension nearest bins.
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, c) in action_combos.iter().enumerate() {
                    let d: f64 =
                        c.iter().zip(action.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                    if d < best_d {
                        best = i;
                        best_d = d;
                    }
                }
                dot(&heads[best], &state_features(state, means, scales))
            }
        }
    }

    /// Greedy action (ties → lowest head/action index).
    pub fn greedy_action(&self, state: &[f64]) -> Vec<f64> {
        match &self.repr {
            QRepr::Tabular { q } => {
                let s = round_index(state[0], q.len());
                let mut best = 0;
                for (a, v) in q[s].iter().enumerate().skip(1) {
                    if *v > q[s][best] {
                        best = a;
                    }
                }
                vec![best as f64]
            }
            QRepr::Linear { means, scales, action_combos, heads } => {
                let f = state_features(state, means, scales);
                let mut best = 0;
                let mut best_v = dot(&heads[0], &f);
                for (c, w) in heads.iter().enumerate().skip(1) {
                    let v = dot(w, &f);
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                action_combos[best].clone()
            }
        }
    }
}

fn train_q(dataset: &OfflineDataset, config: &TrainConfig, conservative: bool) -> Result<QFunction, LearnerError> {
    config.check(dataset)?;
    let repr = match &config.model {
        ModelSpec::Tabular { n_states, n_actions } => {
            train_tabular(dataset, config, conservative, *n_states, *n_actions)?
        }
        ModelSpec::Linear { action_bins } => train_linear(dataset, config, conservative, action_bins)?,
    };
    Ok(QFunction { repr, trained: true, config: config.clone() })
}

fn train_tabular(
    dataset: &OfflineDataset,
    config: &TrainConfig,
    conservative: bool,
    n_states: usize,
    n_actions: usize,
) -> Result<QRepr, LearnerError> {
    if n_states == 0 || n_actions == 0 {
        return Err(LearnerError::Argument("empty model shape".to_string()));
    }
    // Group transitions by their (rounded) state-action cell.
    let mut groups: Vec<Vec<Vec<(f64, usize, bool)>>> = vec![vec![Vec::new(); n_actions]; n_states];
    for tr in dataset.iter_transitions() {
        let s = round_index(tr.state[0], n_states);
        let a = round_index(tr.action[0], n_actions);
        let s2 = round_index(tr.next_state[0], n_states);
        groups[s][a].push((tr.reward, s2, tr.terminal));
    }

    let lr = config.learning_rate;
    let gamma = config.gamma;
    let mut q = vec![vec![0.0f64; n_actions]; n_states];
    for _ in 0..config.iterations {
        let mut next = vec![vec![0.0f64; n_actions]; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let cell = &groups[s][a];
                if cell.is_empty() {
                    // Unobserved: plain FQI leaves the initial value; the
                    // conservative variant pins it below the observed range.
                    next[s][a] = if conservative { 0.0 - config.alpha } else { q[s][a] };
                    continue;
                }
                let mut target = 0.0;
                for (r, s2, terminal) in cell {
                    let boot = if *terminal {
                        0.0
                    } else {
                        q[*s2].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    };
                    target += r + gamma * boot;
                }
                target /= cell.len() as f64;
                next[s][a] = (1.0 - lr) * q[s][a] + lr * target;
            }
        }
        q = next;
    }
    if q.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LearnerError::Numeric("non-finite Q values".to_string()));
    }
    Ok(QRepr::Tabular { q })
}

const RIDGE: f64 = 1e-6;

fn train_linear(
    dataset: &OfflineDataset,
    config: &TrainConfig,
    conservative: bool,
    action_bins: &[Vec<f64>],
) -> Result<QRepr, LearnerError> {
    if action_bins.is_empty() || action_bins.iter().any(|b| b.is_empty()) {
        return Err(LearnerError::Argument("action_bins must be nonempty per dimension".to_string()));
    }
    let s_dim = dataset.meta.state_dim;
    let n = dataset.n_transitions();

    // State moments for the feature map.
    let mut means = vec![0.0; s_dim];
    for tr in dataset.iter_transitions() {
        for (m, x) in means.iter_mut().zip(tr.state.iter()) {
            *m += x;
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut scales = vec![0.0; s_dim];
    for tr in dataset.iter_transitions() {
        for (v, (x, m)) in scales.iter_mut().zip(tr.state.iter().zip(means.iter())) {
            *v += (x - m) * (x - m);
        }
    }
    for v in scales.iter_mut() {
        let sd = (*v / n as f64).sqrt();
        *v = if sd > 0.0 { sd } else { 1.0 };
    }

    let combos = expand_combos(action_bins);
    let f_dim = s_dim + 1;
    let feats: Vec<Vec<f64>> = dataset
        .iter_transitions()
        .map(|tr| state_features(&tr.state, &means, &scales))
        .collect();
    let next_feats: Vec<Vec<f64>> = dataset
        .iter_transitions()
        .map(|tr| state_features(&tr.next_state, &means, &scales))
        .collect();
    let head_of: Vec<usize> = dataset
        .iter_transitions()
        .map(|tr| combo_index(action_bins, &tr.action))
        .collect();

    let lr = config.learning_rate;
    let gamma = config.gamma;
    let mut heads = vec![vec![0.0f64; f_dim]; combos.len()];
    for _ in 0..config.iterations {
        // Bellman targets under the current heads.
        let targets: Vec<f64> = dataset
            .iter_transitions()
            .enumerate()
            .map(|(i, tr)| {
                let boot = if tr.terminal {
                    0.0
                } else {
                    heads
                        .iter()
                        .map(|w| dot(w, &next_feats[i]))
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                tr.reward + gamma * boot
            })
            .collect();

        let mut next_heads = Vec::with_capacity(heads.len());
        for (c, old) in heads.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|i| head_of[*i] == c).collect();
            if rows.is_empty() {
                let mut w = vec![0.0; f_dim];
                if conservative {
                    w[f_dim - 1] = 0.0 - config.alpha;
                } else {
                    w.copy_from_slice(old);
                }
                next_heads.push(w);
                continue;
            }
            // Ridge normal equations over this head's transitions.
            let mut xtx = vec![vec![0.0; f_dim]; f_dim];
            let mut xty = vec![0.0; f_dim];
            for &i in &rows {
                let f = &feats[i];
                for p in 0..f_dim {
                    xty[p] += f[p] * targets[i];
                    for q in 0..f_dim {
                        xtx[p][q] += f[p] * f[q];
                    }
                }
            }
            for (p, row) in xtx.iter_mut().enumerate() {
                row[p] += RIDGE;
            }
            let solved = solve_linear(xtx, xty).map_err(LearnerError::Numeric)?;
            let w: Vec<f64> =
                old.iter().zip(solved.iter()).map(|(o, s)| (1.0 - lr) * o + lr * s).collect();
            next_heads.push(w);
        }
        heads = next_heads;
    }
    if heads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LearnerError::Numeric("non-finite head weights".to_string()));
    }
    Ok(QRepr::Linear { means, scales, action_combos: combos, heads })
}

/// Fitted Q-iteration: full-batch averaged Bellman backups in fixed
/// transition order. The conservative penalty weight is ignored.
pub fn fqi_train(dataset: &OfflineDataset, config: &TrainConfig) -> Result<QFunction, LearnerError> {
    train_q(dataset, config, false)
}

/// FQI plus a conservative penalty: actions unobserved at a state are
/// pinned to −α every iteration, pushing greedy policies toward covered
/// actions. α = 0 reproduces `fqi_train` exactly.
pub fn cql_lite_train(dataset: &OfflineDataset, config: &TrainConfig) -> Result<QFunction, LearnerError> {
    train_q(dataset, config, true)
}

/// A cloned behavior policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BCPolicy {
    Tabular(TabularPolicy),
    /// Continuous: returns the stored action of the nearest stored state.
    NearestNeighbor { states: Vec<Vec<f64>>, actions: Vec<Vec<f64>> },
}

/// Behavioral cloning. Tabular: empirical conditional action frequencies
/// with unseen states mapped to uniform. Continuous: nearest-neighbor
/// lookup of the dataset.
pub fn bc_train(dataset: &OfflineDataset, config: &TrainConfig) -> Result<BCPolicy, LearnerError> {
    config.check(dataset)?;
    match &config.model {
        ModelSpec::Tabular { n_states, n_actions } => {
            let mut counts = vec![vec![0u64; *n_actions]; *n_states];
            for tr in dataset.iter_transitions() {
                let s = round_index(tr.state[0], *n_states);
                let a = round_index(tr.action[0], *n_actions);
                counts[s][a] += 1;
            }
            let probs = counts
                .iter()
                .map(|row| {
                    let total: u64 = row.iter().sum();
                    if total == 0 {
                        vec![1.0 / *n_actions as f64; *n_actions]
                    } else {
                        row.iter().map(|c| *c as f64 / total as f64).collect()
                    }
                })
                .collect();
            Ok(BCPolicy::Tabular(TabularPolicy { probs }))
        }
        ModelSpec::Linear { .. } => {
            let states = dataset.iter_transitions().map(|tr| tr.state.clone()).collect();
            let actions = dataset.iter_transitions().map(|tr| tr.action.clone()).collect();
            Ok(BCPolicy::NearestNeighbor { states, actions })
        }
    }
}

/// Anything evaluate_policy can roll out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainedModel {
    Q(QFunction),
    Policy(BCPolicy),
}

impl Agent for TrainedModel {
    fn act(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            TrainedModel::Q(q) => q.greedy_action(state),
            TrainedModel::Policy(BCPolicy::Tabular(p)) => p.act(state, rng),
            TrainedModel::Policy(BCPolicy::NearestNeighbor { states, actions }) => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, s) in states.iter().enumerate() {
                    let d: f64 = s.iter().zip(state.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                    if d < best_d {
                        best = i;
                        best_d = d;
                    }
                }
                actions[best].clone()
            }
        }
    }
}

/// Mean undiscounted return of `model` over `episodes` seeded episodes in
/// the true environment. Greedy for Q models, sampling for cloned policies.
pub fn evaluate_policy(
    model: &TrainedModel,
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
) -> Result<f64, LearnerError> {
    if episodes == 0 {
        return Err(LearnerError::Argument("episodes must be >= 1".to_string()));
    }
    if let TrainedModel::Q(q) = model {
        if !q.is_trained() {
            return Err(LearnerError::State("value function is not trained".to_string()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng);
        for _ in 0..env.max_steps() {
            let action = model.act(&state, &mut rng);
            let step = env.step(&state, &action, &mut rng);
            total += step.reward;
            if step.terminal {
                break;
            }
            state = step.next_state;
        }
    }
    Ok(total / episodes as f64)
}

/// Attack effectiveness rate: the relative ACR drop, in percent.
pub fn compute_aer(clean_acr: f64, poisoned_acr: f64) -> Result<f64, LearnerError> {
    if clean_acr == 0.0 {
        return Err(LearnerError::Argument(
            "attack effectiveness is undefined for zero clean reward".to_string(),
        ));
    }
    Ok((clean_acr - poisoned_acr) / clean_acr * 100.0)
}
