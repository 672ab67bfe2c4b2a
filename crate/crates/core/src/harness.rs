//! Experiment orchestration: a JSON-described pipeline running
//! generate → discretize → patterns → coverage → attack → train → evaluate
//! → detect, with every intermediate artifact persisted under a directory
//! named by the config hash, plus ablation sweeps and a z-score anomaly
//! detector standing in for model-based defenses.
//!
//! Seeding: each stochastic stage draws `sub_seed(master, COUNTER)` with the
//! counters below, so stages are reproducible in isolation. Evaluation uses
//! the seeds listed in the config directly, which keeps evaluation streams
//! paired across sweep rows.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coverage::{
    analyze_tabular, pattern_frequency_proxy, Behavior, CoverageReport, ProxyCoverage,
    DEFAULT_ENUMERATION_CAP,
};
use crate::dataset::{restrict_access, save, validate, AccessWindow, OfflineDataset};
use crate::discretize::{
    assign_units, elbow_select_k, fit_kmeans, FeatureExtractor, InertiaPoint, KMeansModel,
    UnitSequence,
};
use crate::envs::{
    greedy_policy, make_gridworld, rollout, value_iteration, Agent, Environment, PointMassEnv,
    PointMassPilot, TabularMDP, TabularPolicy,
};
use crate::learners::{
    bc_train, compute_aer, cql_lite_train, fqi_train, evaluate_policy, ModelSpec, TrainConfig,
    TrainedModel,
};
use crate::patterns::{extract_patterns, identify_rare, BudgetUnit, PatternIndex, RareSet};
use crate::poison::{
    restricted_patterns, strategy_by_name, AttackContext, AttackReport, PerturbationBudget,
    ATTACK_KINDS,
};
use crate::sub_seed;

/// Sub-seed counters off the master seed, one per stochastic stage.
pub const SEED_GENERATE: u64 = 1;
pub const SEED_KMEANS: u64 = 2;
pub const SEED_ACCESS: u64 = 3;
pub const SEED_COVERAGE_MC: u64 = 4;
pub const SEED_TRAIN: u64 = 5;
/// Per-attack seed: `SEED_ATTACK_BASE + position of kind in ATTACK_KINDS`.
pub const SEED_ATTACK_BASE: u64 = 16;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn stage_err<E: Display>(stage: &'static str) -> impl FnOnce(E) -> HarnessError {
    move |e| HarnessError::Stage { stage, message: e.to_string() }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Gridworld {
        width: usize,
        height: usize,
        goal: (usize, usize),
        #[serde(default)]
        traps: Vec<(usize, usize)>,
        slip: f64,
        gamma: f64,
    },
    Pointmass {
        #[serde(default = "default_pm_noise")]
        noise_scale: f64,
        #[serde(default = "default_pm_gamma")]
        gamma: f64,
    },
}

fn default_pm_noise() -> f64 {
    0.02
}

fn default_pm_gamma() -> f64 {
    0.99
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Gridworld {
            width: 4,
            height: 4,
            goal: (3, 3),
            traps: vec![(1, 1)],
            slip: 0.1,
            gamma: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorConfig {
    /// ε-greedy around the value-iteration optimum (tabular only).
    EpsilonGreedy { epsilon: f64 },
    /// Uniformly random actions (tabular only).
    Uniform,
    /// PD controller with ε-uniform exploration kicks (point-mass only).
    Pilot { epsilon: f64 },
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig::EpsilonGreedy { epsilon: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscretizeConfig {
    /// Fixed cluster count; when absent the elbow range is scanned.
    pub k: Option<usize>,
    /// Inclusive (k_min, k_max) range for elbow selection.
    pub elbow: Option<(usize, usize)>,
}

impl Default for DiscretizeConfig {
    fn default() -> Self {
        Self { k: None, elbow: Some((2, 8)) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternConfig {
    pub l: usize,
    pub dedup: bool,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self { l: 5, dedup: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    pub kinds: Vec<String>,
    pub rho: f64,
    pub eta: f64,
    pub n_candidates: usize,
    /// Fraction of the dataset the attacker can see and touch.
    pub access_fraction: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kinds: vec!["csdpc".to_string()],
            rho: 0.01,
            eta: 0.05,
            n_candidates: 32,
            access_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub kind: String,
    /// Defaults to the learner's own default when absent.
    pub iterations: Option<usize>,
    pub learning_rate: f64,
    pub alpha: f64,
    /// Per-action-dimension bin centers; required for continuous Q-learners.
    pub action_bins: Option<Vec<Vec<f64>>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { kind: "fqi".to_string(), iterations: None, learning_rate: 1.0, alpha: 1.0, action_bins: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Episodes per evaluation seed.
    pub episodes: usize,
    /// Evaluation stream seeds; the reported ACR is the mean across them.
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 50, seeds: vec![0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageSection {
    /// Sequence lengths analyzed exactly (tabular environments).
    pub lengths: Vec<usize>,
    pub r_max: f64,
    /// Assumed Bellman error for the Q-error bounds.
    pub epsilon: f64,
}

impl Default for CoverageSection {
    fn default() -> Self {
        Self { lengths: vec![1, 2, 3], r_max: 1.0, epsilon: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectSection {
    pub threshold_sigma: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self { threshold_sigma: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub behavior: BehaviorConfig,
    pub n_trajectories: usize,
    pub discretize: DiscretizeConfig,
    pub patterns: PatternConfig,
    pub attack: AttackSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub coverage: CoverageSection,
    pub detect: DetectSection,
    /// Artifact root; nothing is written when absent.
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig::default(),
            behavior: BehaviorConfig::default(),
            n_trajectories: 200,
            discretize: DiscretizeConfig::default(),
            patterns: PatternConfig::default(),
            attack: AttackSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            coverage: CoverageSection::default(),
            detect: DetectSection::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_trajectories == 0 {
            return Err(HarnessError::Config("n_trajectories must be >= 1".to_string()));
        }
        if self.eval.seeds.is_empty() {
            return Err(HarnessError::Config("eval.seeds must be nonempty".to_string()));
        }
        if self.eval.episodes == 0 {
            return Err(HarnessError::Config("eval.episodes must be >= 1".to_string()));
        }
        if self.attack.kinds.is_empty() {
            return Err(HarnessError::Config("attack.kinds must be nonempty".to_string()));
        }
        for kind in &self.attack.kinds {
            strategy_by_name(kind).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if !matches!(self.train.kind.as_str(), "fqi" | "cql_lite" | "bc") {
            return Err(HarnessError::Config(format!(
                "unknown learner kind '{}' (known: fqi, cql_lite, bc)",
                self.train.kind
            )));
        }
        if self.patterns.l < 1 {
            return Err(HarnessError::Config("patterns.l must be >= 1".to_string()));
        }
        if !(self.attack.access_fraction > 0.0 && self.attack.access_fraction <= 1.0) {
            return Err(HarnessError::Config(format!(
                "access_fraction {} outside (0, 1]",
                self.attack.access_fraction
            )));
        }
        if !(self.attack.rho > 0.0 && self.attack.rho < 1.0) {
            return Err(HarnessError::Config(format!("rho {} outside (0, 1)", self.attack.rho)));
        }
        if !(self.attack.eta > 0.0 && self.attack.eta < 1.0) {
            return Err(HarnessError::Config(format!("eta {} outside (0, 1)", self.attack.eta)));
        }
        if self.attack.n_candidates == 0 {
            return Err(HarnessError::Config("n_candidates must be >= 1".to_string()));
        }
        if self.discretize.k.is_none() && self.discretize.elbow.is_none() {
            return Err(HarnessError::Config(
                "discretize needs a fixed k or an elbow range".to_string(),
            ));
        }
        if let Some(k) = self.discretize.k {
            if k < 2 {
                return Err(HarnessError::Config(format!("discretize.k = {k} must be >= 2")));
            }
        }
        match (&self.env, &self.behavior) {
            (EnvConfig::Gridworld { .. }, BehaviorConfig::EpsilonGreedy { .. })
            | (EnvConfig::Gridworld { .. }, BehaviorConfig::Uniform)
            | (EnvConfig::Pointmass { .. }, BehaviorConfig::Pilot { .. }) => Ok(()),
            _ => Err(HarnessError::Config(
                "behavior kind does not match environment kind".to_string(),
            )),
        }
    }
}

/// Hex SHA-256 of the canonical JSON encoding. Identical configs hash
/// identically; any field change changes the hash.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Stages

/// The environment plus, when tabular, the exact MDP for analysis.
pub struct EnvHandle {
    pub env: Box<dyn Environment>,
    pub mdp: Option<TabularMDP>,
}

pub fn build_env_and_behavior(
    config: &ExperimentConfig,
) -> Result<(EnvHandle, Box<dyn Agent>), HarnessError> {
    match (&config.env, &config.behavior) {
        (EnvConfig::Gridworld { width, height, goal, traps, slip, gamma }, behavior) => {
            let mdp = make_gridworld(*width, *height, *goal, traps, *slip, *gamma)
                .map_err(stage_err("generate"))?;
            let agent: Box<dyn Agent> = match behavior {
                BehaviorConfig::EpsilonGreedy { epsilon } => {
                    let q = value_iteration(&mdp, 1e-10, 10_000);
                    Box::new(
                        crate::envs::epsilon_greedy_policy(&q, *epsilon)
                            .map_err(stage_err("generate"))?,
                    )
                }
                BehaviorConfig::Uniform => {
                    Box::new(TabularPolicy::uniform(mdp.n_states, mdp.n_actions))
                }
                BehaviorConfig::Pilot { .. } => {
                    return Err(HarnessError::Config(
                        "pilot behavior needs a point-mass environment".to_string(),
                    ))
                }
            };
            Ok((EnvHandle { env: Box::new(mdp.clone()), mdp: Some(mdp) }, agent))
        }
        (EnvConfig::Pointmass { noise_scale, gamma }, BehaviorConfig::Pilot { epsilon }) => {
            let env = PointMassEnv { noise_scale: *noise_scale, gamma: *gamma, ..PointMassEnv::default() };
            env.validate().map_err(stage_err("generate"))?;
            let pilot = PointMassPilot::for_env(&env, *epsilon);
            Ok((EnvHandle { env: Box::new(env), mdp: None }, Box::new(pilot)))
        }
        _ => Err(HarnessError::Config("behavior kind does not match environment kind".to_string())),
    }
}

pub fn generate_dataset(config: &ExperimentConfig) -> Result<OfflineDataset, HarnessError> {
    let (handle, agent) = build_env_and_behavior(config)?;
    let dataset = rollout(
        handle.env.as_ref(),
        agent.as_ref(),
        config.n_trajectories,
        sub_seed(config.seed, SEED_GENERATE),
    )
    .map_err(stage_err("generate"))?;
    let report = validate(&dataset);
    if report.has_errors() {
        return Err(HarnessError::Stage {
            stage: "generate",
            message: format!("generated dataset failed validation: {:?}", report.issues),
        });
    }
    Ok(dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub extractor: FeatureExtractor,
    pub model: KMeansModel,
    pub units: UnitSequence,
    /// Inertia curve when k was elbow-selected.
    pub elbow_curve: Option<Vec<InertiaPoint>>,
}

pub fn discretize_dataset(
    config: &ExperimentConfig,
    dataset: &OfflineDataset,
) -> Result<Discretization, HarnessError> {
    let err = stage_err("discretize");
    let extractor = FeatureExtractor::fit_standardized(dataset).map_err(err)?;
    let features = extractor.extract_all(dataset);
    let kmeans_seed = sub_seed(config.seed, SEED_KMEANS);
    let (model, elbow_curve) = if let Some(k) = config.discretize.k {
        (fit_kmeans(&features, k, kmeans_seed, 100, 1e-9).map_err(stage_err("discretize"))?, None)
    } else {
        let (k_min, k_max) = config.discretize.elbow.unwrap_or((2, 8));
        let selection =
            elbow_select_k(&features, k_min, k_max, kmeans_seed).map_err(stage_err("discretize"))?;
        (selection.model, Some(selection.curve))
    };
    let units = assign_units(dataset, &extractor, &model).map_err(stage_err("discretize"))?;
    Ok(Discretization { extractor, model, units, elbow_curve })
}

pub struct PatternArtifacts {
    pub index: PatternIndex,
    pub rare: RareSet,
    pub access: Option<AccessWindow>,
}

pub fn pattern_stage(
    config: &ExperimentConfig,
    dataset: &OfflineDataset,
    disc: &Discretization,
) -> Result<PatternArtifacts, HarnessError> {
    let l = config.patterns.l;
    let dedup = config.patterns.dedup;
    let rho = config.attack.rho;
    let n = dataset.n_transitions();
    if config.attack.access_fraction < 1.0 {
        let access = restrict_access(
            dataset,
            config.attack.access_fraction,
            sub_seed(config.seed, SEED_ACCESS),
        )
        .map_err(stage_err("patterns"))?;
        let (index, rare) =
            restricted_patterns(&disc.units, &access, l, dedup, rho, n, BudgetUnit::Transitions)
                .map_err(stage_err("patterns"))?;
        Ok(PatternArtifacts { index, rare, access: Some(access) })
    } else {
        let index = extract_patterns(&disc.units, l, dedup).map_err(stage_err("patterns"))?;
        let rare = identify_rare(&index, rho, n, BudgetUnit::Transitions)
            .map_err(stage_err("patterns"))?;
        Ok(PatternArtifacts { index, rare, access: None })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    /// Pattern-frequency proxy, available for every environment.
    pub proxy: ProxyCoverage,
    /// Exact concentrability analysis versus the optimal target policy,
    /// tabular environments only.
    pub tabular: Option<CoverageReport>,
}

pub fn coverage_stage(
    config: &ExperimentConfig,
    handle: &EnvHandle,
    dataset: &OfflineDataset,
    index: &PatternIndex,
) -> Result<CoverageSummary, HarnessError> {
    let proxy = pattern_frequency_proxy(index).map_err(stage_err("coverage"))?;
    let tabular = match &handle.mdp {
        Some(mdp) => {
            let q = value_iteration(mdp, 1e-10, 10_000);
            let target = greedy_policy(&q);
            Some(
                analyze_tabular(
                    mdp,
                    &target,
                    Behavior::Dataset(dataset),
                    &config.coverage.lengths,
                    config.coverage.r_max,
                    config.coverage.epsilon,
                    DEFAULT_ENUMERATION_CAP,
                    sub_seed(config.seed, SEED_COVERAGE_MC),
                )
                .map_err(stage_err("coverage"))?,
            )
        }
        None => None,
    };
    Ok(CoverageSummary { proxy, tabular })
}

pub fn attack_stage(
    config: &ExperimentConfig,
    kind: &str,
    dataset: &OfflineDataset,
    disc: &Discretization,
    patterns: &PatternArtifacts,
    value_fn: Option<&dyn crate::learners::StateActionValue>,
) -> Result<(OfflineDataset, AttackReport), HarnessError> {
    let ordinal = ATTACK_KINDS
        .iter()
        .position(|k| *k == kind)
        .ok_or_else(|| HarnessError::Config(format!("unknown attack kind '{kind}'")))? as u64;
    let budget = PerturbationBudget {
        eta: config.attack.eta,
        n_candidates: config.attack.n_candidates,
        seed: sub_seed(config.seed, SEED_ATTACK_BASE + ordinal),
    };
    let ctx = AttackContext {
        dataset,
        extractor: &disc.extractor,
        model: &disc.model,
        index: &patterns.index,
        rare: &patterns.rare,
        budget,
        value_fn,
    };
    let (mut poisoned, report) = strategy_by_name(kind)
        .map_err(stage_err("attack"))?
        .run(&ctx)
        .map_err(stage_err("attack"))?;
    if !report.poisoned_indices.is_empty() {
        poisoned.meta.poisoned = true;
    }
    Ok((poisoned, report))
}

fn train_config(
    config: &ExperimentConfig,
    handle: &EnvHandle,
    dataset: &OfflineDataset,
) -> Result<TrainConfig, HarnessError> {
    let model = match &handle.mdp {
        Some(mdp) => ModelSpec::Tabular { n_states: mdp.n_states, n_actions: mdp.n_actions },
        None => ModelSpec::Linear {
            action_bins: config.train.action_bins.clone().ok_or_else(|| {
                HarnessError::Config(
                    "continuous Q-learners need train.action_bins".to_string(),
                )
            })?,
        },
    };
    let mut tc = match &model {
        ModelSpec::Tabular { n_states, n_actions } => {
            TrainConfig::tabular(*n_states, *n_actions, dataset.meta.gamma)
        }
        ModelSpec::Linear { action_bins } => {
            TrainConfig::linear(action_bins.clone(), dataset.meta.gamma)
        }
    };
    if let Some(iters) = config.train.iterations {
        tc.iterations = iters;
    }
    tc.learning_rate = config.train.learning_rate;
    tc.alpha = config.train.alpha;
    tc.seed = sub_seed(config.seed, SEED_TRAIN);
    Ok(tc)
}

pub fn train_stage(
    config: &ExperimentConfig,
    handle: &EnvHandle,
    dataset: &OfflineDataset,
) -> Result<TrainedModel, HarnessError> {
    let tc = train_config(config, handle, dataset)?;
    let err = stage_err("train");
    match config.train.kind.as_str() {
        "fqi" => Ok(TrainedModel::Q(fqi_train(dataset, &tc).map_err(err)?)),
        "cql_lite" => Ok(TrainedModel::Q(cql_lite_train(dataset, &tc).map_err(err)?)),
        "bc" => Ok(TrainedModel::Policy(bc_train(dataset, &tc).map_err(err)?)),
        other => Err(HarnessError::Config(format!("unknown learner kind '{other}'"))),
    }
}

/// Mean ACR across the config's evaluation seeds.
pub fn eval_stage(
    config: &ExperimentConfig,
    handle: &EnvHandle,
    model: &TrainedModel,
) -> Result<f64, HarnessError> {
    let mut total = 0.0;
    for &seed in &config.eval.seeds {
        total += evaluate_policy(model, handle.env.as_ref(), config.eval.episodes, seed)
            .map_err(stage_err("evaluate"))?;
    }
    Ok(total / config.eval.seeds.len() as f64)
}

// ---------------------------------------------------------------------------
// Detection

/// Per-coordinate mean/std of the concatenated (state, action) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl FeatureStats {
    /// Population moments over every transition of a clean reference.
    pub fn fit(dataset: &OfflineDataset) -> Result<Self, HarnessError> {
        let n = dataset.n_transitions();
        if n == 0 {
            return Err(HarnessError::Config("cannot fit stats on an empty dataset".to_string()));
        }
        let dim = dataset.meta.state_dim + dataset.meta.action_dim;
        let mut means = vec![0.0; dim];
        for tr in dataset.iter_transitions() {
            for (i, x) in tr.state.iter().chain(tr.action.iter()).enumerate() {
                means[i] += x;
            }
        }
        for m in means.iter_mut() {
            *m /= n as f64;
        }
        let mut vars = vec![0.0; dim];
        for tr in dataset.iter_transitions() {
            for (i, x) in tr.state.iter().chain(tr.action.iter()).enumerate() {
                let d = x - means[i];
                vars[i] += d * d;
            }
        }
        let stds = vars.into_iter().map(|v| (v / n as f64).sqrt()).collect();
        Ok(Self { means, stds })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Global indices of flagged transitions.
    pub flagged: Vec<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground truth was empty: recall is reported as 0 by convention.
    pub zero_positives: bool,
    /// Zero-variance coordinates excluded from scoring.
    pub skipped_dims: Vec<usize>,
    pub threshold_sigma: f64,
}

/// Flags transitions whose standardized (state, action) deviation reaches
/// `threshold_sigma` in any coordinate (so a threshold of 0 flags
/// everything), then scores the flags against the ground-truth mask.
pub fn detect_anomalies(
    clean_stats: &FeatureStats,
    dataset: &OfflineDataset,
    threshold_sigma: f64,
    truth: &[usize],
) -> DetectionResult {
    let skipped_dims: Vec<usize> = clean_stats
        .stds
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == 0.0)
        .map(|(i, _)| i)
        .collect();
    let mut flagged = Vec::new();
    for (idx, tr) in dataset.iter_transitions().enumerate() {
        let hit = tr
            .state
            .iter()
            .chain(tr.action.iter())
            .enumerate()
            .filter(|(i, _)| clean_stats.stds.get(*i).is_some_and(|s| *s > 0.0))
            .any(|(i, x)| ((x - clean_stats.means[i]) / clean_stats.stds[i]).abs() >= threshold_sigma);
        if hit {
            flagged.push(idx);
        }
    }
    let truth_set: std::collections::BTreeSet<usize> = truth.iter().copied().collect();
    let tp = flagged.iter().filter(|i| truth_set.contains(i)).count() as f64;
    let precision = if flagged.is_empty() { 0.0 } else { tp / flagged.len() as f64 };
    let zero_positives = truth_set.is_empty();
    let recall = if zero_positives { 0.0 } else { tp / truth_set.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    DetectionResult { flagged, precision, recall, f1, zero_positives, skipped_dims, threshold_sigma }
}

// ---------------------------------------------------------------------------
// Run orchestration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub kind: String,
    pub poisoned_acr: f64,
    /// Relative ACR drop in percent; absent when the clean ACR is 0.
    pub aer: Option<f64>,
    pub poisoned_transitions: usize,
    pub poisoned_fraction: f64,
    pub distinct_patterns_before: usize,
    pub distinct_patterns_after: usize,
    pub rare_residual_total: u64,
    pub max_perturbation_ratio: f64,
    /// Pattern-frequency proxy on the poisoned dataset; absent when no
    /// window survives (e.g. heavy deletion).
    pub proxy: Option<ProxyCoverage>,
    pub detection: DetectionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub clean_acr: f64,
    pub attacks: BTreeMap<String, AttackOutcome>,
    pub coverage_clean: CoverageSummary,
    pub access: Option<AccessWindow>,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

/// The run's metrics with the wall clock removed — the canonical
/// byte-comparable form for determinism checks.
pub fn metrics_value(result: &RunResult) -> serde_json::Value {
    let mut v = serde_json::to_value(result).expect("result serializes");
    v.as_object_mut().expect("result is an object").remove("wall_clock_secs");
    v
}

fn write_artifact(dir: &Option<PathBuf>, name: &str, contents: &str) -> Result<(), HarnessError> {
    if let Some(d) = dir {
        fs::write(d.join(name), contents)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(
    dir: &Option<PathBuf>,
    name: &str,
    value: &T,
) -> Result<(), HarnessError> {
    if dir.is_some() {
        let json = serde_json::to_string_pretty(value)
            .map_err(|e| HarnessError::Stage { stage: "persist", message: e.to_string() })?;
        write_artifact(dir, name, &(json + "\n"))?;
    }
    Ok(())
}

fn save_dataset(
    dir: &Option<PathBuf>,
    name: &str,
    dataset: &OfflineDataset,
) -> Result<(), HarnessError> {
    if let Some(d) = dir {
        save(dataset, d.join(name))
            .map_err(|e| HarnessError::Stage { stage: "persist", message: e.to_string() })?;
    }
    Ok(())
}

/// Runs the full pipeline for one config. Artifacts (datasets, models,
/// reports) are persisted incrementally under `out_dir/run-<hash>/`, so a
/// failing stage leaves everything built before it on disk.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let hash = config_hash(config);
    let run_dir: Option<PathBuf> = match &config.out_dir {
        Some(root) => {
            let dir = Path::new(root).join(format!("run-{}", &hash[..12]));
            fs::create_dir_all(&dir)?;
            Some(dir)
        }
        None => None,
    };
    write_json(&run_dir, "config.json", config)?;
    let mut warnings: Vec<String> = Vec::new();

    let (handle, _) = build_env_and_behavior(config)?;
    let clean = generate_dataset(config)?;
    save_dataset(&run_dir, "clean.ord", &clean)?;

    let disc = discretize_dataset(config, &clean)?;
    write_json(&run_dir, "discretize.json", &disc)?;

    let patterns = pattern_stage(config, &clean, &disc)?;
    write_json(&run_dir, "patterns.json", &patterns.index.export())?;
    write_artifact(&run_dir, "patterns.csv", &patterns.index.to_csv())?;
    write_json(&run_dir, "rare.json", &patterns.rare)?;
    if patterns.rare.empty_warning {
        warnings.push("rare set is empty: attacks will be no-ops".to_string());
    }

    let coverage_clean = coverage_stage(config, &handle, &clean, &patterns.index)?;
    write_json(&run_dir, "coverage.json", &coverage_clean)?;

    let model_clean = train_stage(config, &handle, &clean)?;
    write_json(&run_dir, "model-clean.json", &model_clean)?;
    let clean_acr = eval_stage(config, &handle, &model_clean)?;
    let clean_stats = FeatureStats::fit(&clean)?;

    // The value-ranked baseline scores windows with a Q trained on clean
    // data, regardless of the evaluation learner.
    let value_q = if config.attack.kinds.iter().any(|k| k == "value_target") {
        let mut tc = train_config(config, &handle, &clean)?;
        tc.alpha = 0.0;
        Some(fqi_train(&clean, &tc).map_err(stage_err("attack"))?)
    } else {
        None
    };

    let mut attacks = BTreeMap::new();
    for kind in &config.attack.kinds {
        let (poisoned, report) = attack_stage(
            config,
            kind,
            &clean,
            &disc,
            &patterns,
            value_q.as_ref().map(|q| q as &dyn crate::learners::StateActionValue),
        )?;
        save_dataset(&run_dir, &format!("poisoned-{kind}.ord"), &poisoned)?;
        write_json(&run_dir, &format!("attack-{kind}.json"), &report)?;
        write_artifact(&run_dir, &format!("attack-{kind}.csv"), &report.rows_csv())?;
        warnings.extend(report.warnings.iter().map(|w| format!("{kind}: {w}")));

        let model_poisoned = train_stage(config, &handle, &poisoned)?;
        write_json(&run_dir, &format!("model-{kind}.json"), &model_poisoned)?;
        let poisoned_acr = eval_stage(config, &handle, &model_poisoned)?;
        let aer = if clean_acr == 0.0 {
            warnings.push(format!("{kind}: clean ACR is 0, AER undefined"));
            None
        } else {
            Some(compute_aer(clean_acr, poisoned_acr).map_err(stage_err("evaluate"))?)
        };

        // Deletion changes cardinality, so no per-transition ground truth
        // exists in the poisoned dataset's index space.
        let truth: Vec<usize> = if poisoned.n_transitions() == clean.n_transitions() {
            report.poisoned_indices.clone()
        } else {
            Vec::new()
        };
        let detection =
            detect_anomalies(&clean_stats, &poisoned, config.detect.threshold_sigma, &truth);
        write_json(&run_dir, &format!("detection-{kind}.json"), &detection)?;

        let proxy = if poisoned.n_transitions() == 0 {
            None
        } else {
            let units = assign_units(&poisoned, &disc.extractor, &disc.model)
                .map_err(stage_err("detect"))?;
            match extract_patterns(&units, config.patterns.l, config.patterns.dedup) {
                Ok(ix) => Some(pattern_frequency_proxy(&ix).map_err(stage_err("detect"))?),
                Err(_) => None,
            }
        };

        attacks.insert(
            kind.clone(),
            AttackOutcome {
                kind: kind.clone(),
                poisoned_acr,
                aer,
                poisoned_transitions: report.poisoned_transitions,
                poisoned_fraction: report.poisoned_fraction,
                distinct_patterns_before: report.distinct_patterns_before,
                distinct_patterns_after: report.distinct_patterns_after,
                rare_residual_total: report.rare_residual.values().sum(),
                max_perturbation_ratio: report.max_perturbation_ratio,
                proxy,
                detection,
            },
        );
    }

    let result = RunResult {
        config_hash: hash,
        clean_acr,
        attacks,
        coverage_clean,
        access: patterns.access,
        warnings,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&run_dir, "metrics.json", &metrics_value(&result))?;
    write_json(&run_dir, "result.json", &result)?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rho,
    Eta,
    L,
    K,
    AccessFraction,
    Dedup,
    AttackKind,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Rho => "rho",
            SweepAxis::Eta => "eta",
            SweepAxis::L => "l",
            SweepAxis::K => "k",
            SweepAxis::AccessFraction => "access_fraction",
            SweepAxis::Dedup => "dedup",
            SweepAxis::AttackKind => "attack_kind",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rho" => Ok(SweepAxis::Rho),
            "eta" => Ok(SweepAxis::Eta),
            "l" => Ok(SweepAxis::L),
            "k" => Ok(SweepAxis::K),
            "access_fraction" => Ok(SweepAxis::AccessFraction),
            "dedup" => Ok(SweepAxis::Dedup),
            "attack_kind" => Ok(SweepAxis::AttackKind),
            other => Err(format!(
                "unknown sweep axis '{other}' (known: rho, eta, l, k, access_fraction, dedup, attack_kind)"
            )),
        }
    }
}

fn axis_f64(v: &serde_json::Value) -> Result<f64, HarnessError> {
    v.as_f64().ok_or_else(|| HarnessError::Config(format!("expected a number, got {v}")))
}

fn axis_usize(v: &serde_json::Value) -> Result<usize, HarnessError> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| HarnessError::Config(format!("expected a non-negative integer, got {v}")))
}

fn apply_axis(
    config: &mut ExperimentConfig,
    axis: SweepAxis,
    value: &serde_json::Value,
) -> Result<(), HarnessError> {
    match axis {
        SweepAxis::Rho => config.attack.rho = axis_f64(value)?,
        SweepAxis::Eta => config.attack.eta = axis_f64(value)?,
        SweepAxis::L => config.patterns.l = axis_usize(value)?,
        SweepAxis::K => {
            config.discretize.k = Some(axis_usize(value)?);
            config.discretize.elbow = None;
        }
        SweepAxis::AccessFraction => config.attack.access_fraction = axis_f64(value)?,
        SweepAxis::Dedup => {
            config.patterns.dedup = value
                .as_bool()
                .ok_or_else(|| HarnessError::Config(format!("expected a bool, got {value}")))?;
        }
        SweepAxis::AttackKind => {
            let kind = value
                .as_str()
                .ok_or_else(|| HarnessError::Config(format!("expected a string, got {value}")))?;
            config.attack.kinds = vec![kind.to_string()];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub result: Option<RunResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// One CSV row per (axis value, attack kind) for successful runs.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "value,kind,clean_acr,poisoned_acr,aer,precision,recall,f1,poisoned_transitions,\
             distinct_before,distinct_after,rare_residual_total\n",
        );
        for row in &self.rows {
            let Some(result) = &row.result else { continue };
            for (kind, a) in &result.attacks {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    row.value,
                    kind,
                    result.clean_acr,
                    a.poisoned_acr,
                    a.aer.map_or(String::new(), |x| x.to_string()),
                    a.detection.precision,
                    a.detection.recall,
                    a.detection.f1,
                    a.poisoned_transitions,
                    a.distinct_patterns_before,
                    a.distinct_patterns_after,
                    a.rare_residual_total
                ));
            }
        }
        out
    }

    pub fn failures(&self) -> Vec<(String, String)> {
        self.rows
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| (r.value.clone(), e.clone())))
            .collect()
    }
}

/// One run per axis value off a shared base config and seed. Row errors are
/// captured and the sweep continues.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[serde_json::Value],
) -> Result<SweepTable, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".to_string()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut config = base.clone();
        let run = apply_axis(&mut config, axis, value).and_then(|()| run_experiment(&config));
        rows.push(match run {
            Ok(result) => SweepRow { value: value.to_string(), result: Some(result), error: None },
            Err(e) => SweepRow { value: value.to_string(), result: None, error: Some(e.to_string()) },
        });
    }
    Ok(SweepTable { axis: axis.name().to_string(), rows })
}
