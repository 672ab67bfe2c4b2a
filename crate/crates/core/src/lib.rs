//! Sequence-level data-policy coverage analysis and poisoning attacks for
//! offline reinforcement learning datasets.
//!
//! The crate is organized around a fixed pipeline over an [`dataset::OfflineDataset`]:
//!
//! 1. [`envs`] — desk-scale environments (tabular gridworld, continuous
//!    point-mass), behavior-policy rollouts, and exact occupancy computation.
//! 2. [`discretize`] — feature extraction plus k-means conversion of
//!    state-action pairs into discrete decision units.
//! 3. [`patterns`] — sliding-window extraction of decision patterns,
//!    occurrence counting, and rare-pattern identification under a budget.
//! 4. [`coverage`] — single-step and sequence-level concentrability
//!    coefficients and the associated Q-error bounds.
//! 5. [`poison`] — the CSDPC attack and its baselines, each behind the
//!    [`poison::AttackStrategy`] trait and selectable by name.
//! 6. [`learners`] — offline learners (FQI, a conservative variant,
//!    behavioral cloning) and policy evaluation.
//! 7. [`harness`] — experiment orchestration, sweeps, anomaly detection,
//!    and report emission.

pub mod coverage;
pub mod dataset;
pub mod discretize;
pub mod envs;
pub mod harness;
pub mod learners;
pub mod patterns;
pub mod poison;

mod linalg;
mod rng;

pub use rng::sub_seed;
