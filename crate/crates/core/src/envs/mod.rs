//! Desk-scale environments and data collection.
//!
//! Environments are immutable dynamics models: `step` is a pure function of
//! `(state, action, rng)`, so rollouts are reproducible from a seed alone.
//! Tabular MDPs double as ground-truth models for exact occupancy and
//! coverage computation; the point-mass task is the continuous stand-in.

mod gridworld;
mod pointmass;
mod tabular;

pub use gridworld::make_gridworld;
pub use pointmass::{PointMassEnv, PointMassPilot};
pub use tabular::{
    empirical_distribution, epsilon_greedy_policy, exact_occupancy, greedy_policy,
    value_iteration, TabularMDP, TabularPolicy,
};

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{DatasetMeta, OfflineDataset, Trajectory, Transition};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("{0}")]
    Argument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Outcome of a single environment step.
#[derive(Debug, Clone)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// A stateless dynamics model. `step` must not mutate shared state; all
/// stochasticity flows through the caller's rng.
pub trait Environment {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn gamma(&self) -> f64;
    /// Hard episode cap; rollout truncates here if no terminal is reached.
    fn max_steps(&self) -> usize;
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64], rng: &mut dyn RngCore) -> Step;
}

/// Anything that maps a state to an action, possibly stochastically.
pub trait Agent {
    fn act(&self, state: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Collects `n_trajectories` episodes under `agent` into an offline dataset.
/// Episodes end at terminal states or at the environment's step cap.
pub fn rollout(
    env: &dyn Environment,
    agent: &dyn Agent,
    n_trajectories: usize,
    seed: u64,
) -> Result<OfflineDataset, EnvError> {
    if n_trajectories == 0 {
        return Err(EnvError::Argument("n_trajectories must be >= 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_trajectories);
    for id in 0..n_trajectories {
        let mut state = env.reset(&mut rng);
        let mut transitions = Vec::new();
        for _ in 0..env.max_steps() {
            let action = agent.act(&state, &mut rng);
            let step = env.step(&state, &action, &mut rng);
            let terminal = step.terminal;
            transitions.push(Transition {
                state: state.clone(),
                action,
                reward: step.reward,
                next_state: step.next_state.clone(),
                terminal,
            });
            if terminal {
                break;
            }
            state = step.next_state;
        }
        trajectories.push(Trajectory { id: id as u64, transitions });
    }
    Ok(OfflineDataset {
        meta: DatasetMeta {
            env: env.name().to_string(),
            state_dim: env.state_dim(),
            action_dim: env.action_dim(),
            max_length: env.max_steps(),
            gamma: env.gamma(),
            seed,
            poisoned: false,
        },
        trajectories,
    })
}

/// Samples an index from a probability vector via the cumulative scan.
/// The final bucket absorbs rounding slack.
pub(crate) fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rand::Rng::gen(rng);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
