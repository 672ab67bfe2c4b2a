//! Dataset poisoning: stealth-bounded perturbation of rare-pattern windows
//! with frequency-maximizing candidate selection, plus the baseline family
//! (perturb-only, delete, random-target, value-target, spread-step).
//!
//! All attacks are registered by name behind [`AttackStrategy`] and selected
//! at runtime. A "C-value"-ranked window selection is deliberately not
//! implemented (no sound offline estimator for it); `random_target` and
//! `value_target` cover the selection-criterion comparisons.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AccessWindow, OfflineDataset, Trajectory, Transition};
use crate::discretize::{
    assign_units, nearest, DiscretizeError, FeatureExtractor, KMeansModel, UnitSequence,
};
use crate::learners::StateActionValue;
use crate::patterns::{
    extract_patterns, identify_rare, pattern_of, BudgetUnit, DecisionPattern, PatternError,
    PatternIndex, RareSet, Window,
};
use crate::sub_seed;

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("{0}")]
    Argument(String),
    #[error("stealth constraint violated: {0}")]
    Stealth(String),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

/// Per-transition relative perturbation limit and candidate-set size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    /// Relative infinity-norm bound: every perturbed state/action satisfies
    /// ‖x′−x‖∞ < eta·‖x‖∞ strictly.
    pub eta: f64,
    /// Candidates per window, the unperturbed original included.
    pub n_candidates: usize,
    pub seed: u64,
}

impl PerturbationBudget {
    pub fn check(&self) -> Result<(), PoisonError> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(PoisonError::Argument(format!("eta {} outside (0,1)", self.eta)));
        }
        if self.n_candidates < 1 {
            return Err(PoisonError::Argument("n_candidates must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Everything an attack needs: the clean dataset and the discretization /
/// pattern artifacts built from it.
pub struct AttackContext<'a> {
    pub dataset: &'a OfflineDataset,
    pub extractor: &'a FeatureExtractor,
    pub model: &'a KMeansModel,
    /// Clean-dataset occurrence index; held fixed for O(p) lookups.
    pub index: &'a PatternIndex,
    pub rare: &'a RareSet,
    pub budget: PerturbationBudget,
    /// Q-function for the value-ranked window baseline.
    pub value_fn: Option<&'a dyn StateActionValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub window: Window,
    pub before: DecisionPattern,
    pub after: DecisionPattern,
    /// Index into the candidate set; 0 means the original was kept.
    pub chosen_candidate: usize,
    /// Max relative perturbation applied by this window's rewrite.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: String,
    /// Transitions whose bits changed (or were deleted), in clean-dataset
    /// global order — the ground truth mask for detection.
    pub poisoned_indices: Vec<usize>,
    pub poisoned_transitions: usize,
    pub poisoned_fraction: f64,
    pub windows: Vec<WindowOutcome>,
    /// Post-attack occurrence count of each rare pattern (key: labels
    /// joined by '-').
    pub rare_residual: BTreeMap<String, u64>,
    pub max_perturbation_ratio: f64,
    pub distinct_patterns_before: usize,
    pub distinct_patterns_after: usize,
    pub eta: f64,
    pub n_candidates: usize,
    pub seed: u64,
    pub l: usize,
    pub dedup: bool,
    pub budget: usize,
    pub budget_used: usize,
    pub warnings: Vec<String>,
}

impl AttackReport {
    /// CSV of per-window outcomes.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("trajectory,start,len,before,after,candidate,max_ratio\n");
        for o in &self.windows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                o.window.trajectory,
                o.window.start,
                o.window.len,
                pattern_key(&o.before),
                pattern_key(&o.after),
                o.chosen_candidate,
                o.max_ratio
            ));
        }
        out
    }
}

fn pattern_key(p: &DecisionPattern) -> String {
    let labels: Vec<String> = p.0.iter().map(|l| l.to_string()).collect();
    labels.join("-")
}

fn linf(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn linf_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// One coordinate perturbed by a uniform draw, with the realized
/// (post-rounding) delta kept strictly inside `bound`. Always consumes one
/// draw so candidate streams stay aligned across zero-norm transitions.
fn perturb_coord(x: f64, bound: f64, rng: &mut ChaCha8Rng) -> f64 {
    let r: f64 = rng.gen_range(-1.0..1.0);
    if bound <= 0.0 {
        return x;
    }
    let mut z = r * bound * (1.0 - 1e-9);
    loop {
        let y = x + z;
        if (y - x).abs() < bound {
            return y;
        }
        z *= 0.5;
        if z == 0.0 {
            return x;
        }
    }
}

fn perturb_transition(tr: &Transition, eta: f64, rng: &mut ChaCha8Rng) -> Transition {
    let bs = eta * linf(&tr.state);
    let ba = eta * linf(&tr.action);
    Transition {
        state: tr.state.iter().map(|&x| perturb_coord(x, bs, rng)).collect(),
        action: tr.action.iter().map(|&x| perturb_coord(x, ba, rng)).collect(),
        reward: tr.reward,
        next_state: tr.next_state.clone(),
        terminal: tr.terminal,
    }
}

/// Candidate perturbations of a window. Candidate 0 is the unperturbed
/// original; the rest perturb every state and action coordinate by a
/// uniform draw inside the relative bound. Rewards, next-states, and
/// terminal flags are never touched.
pub fn gen_candidates(
    window: &[Transition],
    budget: &PerturbationBudget,
) -> Result<Vec<Vec<Transition>>, PoisonError> {
    budget.check()?;
    if window.is_empty() {
        return Err(PoisonError::Argument("empty window".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut out = Vec::with_capacity(budget.n_candidates);
    out.push(window.to_vec());
    for _ in 1..budget.n_candidates {
        out.push(window.iter().map(|tr| perturb_transition(tr, budget.eta, &mut rng)).collect());
    }
    Ok(out)
}

/// Relabels a candidate window with the existing (clean-fit) extractor and
/// centroids, forms its pattern, and looks the occurrence count up in the
/// clean index (0 when unseen).
pub fn evaluate_candidate(
    candidate: &[Transition],
    extractor: &FeatureExtractor,
    model: &KMeansModel,
    index: &PatternIndex,
) -> Result<(DecisionPattern, u64), PoisonError> {
    if candidate.is_empty() {
        return Err(PoisonError::Argument("empty candidate window".to_string()));
    }
    let centroid_dim = model.centroids.first().map_or(0, |c| c.len());
    if extractor.output_dim() != centroid_dim {
        return Err(PoisonError::Argument(format!(
            "extractor output dim {} != centroid dim {centroid_dim}",
            extractor.output_dim()
        )));
    }
    let input_dim = extractor.input_dim();
    for tr in candidate {
        if tr.state.len() + tr.action.len() != input_dim {
            return Err(PoisonError::Argument(format!(
                "transition dims {}+{} != extractor input dim {input_dim}",
                tr.state.len(),
                tr.action.len()
            )));
        }
    }
    let labels: Vec<u32> = candidate
        .iter()
        .map(|tr| nearest(&model.centroids, &extractor.extract_transition(tr)).0 as u32)
        .collect();
    let p = pattern_of(&labels, index.dedup);
    let count = index.count_of(&p);
    Ok((p, count))
}

fn window_steps(w: &Window) -> impl Iterator<Item = (u64, usize)> + '_ {
    (w.start..w.start + w.len).map(move |s| (w.trajectory, s))
}

fn footprint(windows: &[Window]) -> BTreeSet<(u64, usize)> {
    let mut set = BTreeSet::new();
    for w in windows {
        set.extend(window_steps(w));
    }
    set
}

/// The rewrite engine shared by every perturbation attack: processes
/// windows in ascending (trajectory, offset) order, generates candidates
/// from the current working data, freezes transitions already rewritten by
/// earlier windows (first writer wins), and either picks the candidate with
/// the highest clean-index occurrence count (`select`) or unconditionally
/// takes the first perturbed one.
fn rewrite_windows(
    ctx: &AttackContext,
    targets: &[Window],
    select: bool,
) -> Result<(OfflineDataset, Vec<WindowOutcome>), PoisonError> {
    let mut windows = targets.to_vec();
    windows.sort();
    windows.dedup();
    let mut working = ctx.dataset.clone();
    let mut written: BTreeSet<(u64, usize)> = BTreeSet::new();
    let mut outcomes = Vec::with_capacity(windows.len());
    for (ord, w) in windows.iter().enumerate() {
        let traj = working
            .trajectories
            .get(w.trajectory as usize)
            .ok_or_else(|| PoisonError::Argument(format!("window trajectory {} out of range", w.trajectory)))?;
        if w.start + w.len > traj.transitions.len() {
            return Err(PoisonError::Argument(format!(
                "window [{}, {}+{}) exceeds trajectory length {}",
                w.trajectory,
                w.start,
                w.len,
                traj.transitions.len()
            )));
        }
        let slice: Vec<Transition> = traj.transitions[w.start..w.start + w.len].to_vec();
        let free: Vec<bool> =
            (0..w.len).map(|i| !written.contains(&(w.trajectory, w.start + i))).collect();
        if free.iter().all(|f| !f) {
            continue;
        }
        let per_window = PerturbationBudget {
            seed: sub_seed(ctx.budget.seed, ord as u64),
            ..ctx.budget
        };
        let mut cands = gen_candidates(&slice, &per_window)?;
        for cand in cands.iter_mut() {
            for (i, is_free) in free.iter().enumerate() {
                if !is_free {
                    cand[i] = slice[i].clone();
                }
            }
        }
        let evals: Vec<(DecisionPattern, u64)> = cands
            .iter()
            .map(|c| evaluate_candidate(c, ctx.extractor, ctx.model, ctx.index))
            .collect::<Result<_, _>>()?;
        let before = evals[0].0.clone();
        let chosen = if select {
            let mut best = 0usize;
            for i in 1..evals.len() {
                let better = evals[i].1 > evals[best].1
                    || (evals[i].1 == evals[best].1
                        && evals[i].0 != before
                        && evals[best].0 == before);
                if better {
                    best = i;
                }
            }
            best
        } else if cands.len() > 1 {
            1
        } else {
            0
        };
        let mut max_ratio = 0.0_f64;
        if chosen != 0 {
            let cand = &cands[chosen];
            let traj_mut = &mut working.trajectories[w.trajectory as usize];
            for (i, is_free) in free.iter().enumerate() {
                if !is_free {
                    continue;
                }
                let ns = linf(&slice[i].state);
                if ns > 0.0 {
                    max_ratio = max_ratio.max(linf_diff(&cand[i].state, &slice[i].state) / ns);
                }
                let na = linf(&slice[i].action);
                if na > 0.0 {
                    max_ratio = max_ratio.max(linf_diff(&cand[i].action, &slice[i].action) / na);
                }
                traj_mut.transitions[w.start + i] = cand[i].clone();
                written.insert((w.trajectory, w.start + i));
            }
        }
        outcomes.push(WindowOutcome {
            window: *w,
            before,
            after: evals[chosen].0.clone(),
            chosen_candidate: chosen,
            max_ratio,
        });
    }
    Ok((working, outcomes))
}

fn bits_differ(a: &Transition, b: &Transition) -> bool {
    let ne = |x: &[f64], y: &[f64]| {
        x.len() != y.len()
            || x.iter().zip(y.iter()).any(|(p, q)| p.to_bits() != q.to_bits())
    };
    ne(&a.state, &b.state)
        || ne(&a.action, &b.action)
        || a.reward.to_bits() != b.reward.to_bits()
        || ne(&a.next_state, &b.next_state)
        || a.terminal != b.terminal
}

/// Report assembly for attacks that keep dataset shape: the poisoned mask
/// is the set of transitions whose bits changed.
fn finalize_same_shape(
    ctx: &AttackContext,
    kind: &str,
    working: OfflineDataset,
    outcomes: Vec<WindowOutcome>,
    warnings: Vec<String>,
) -> Result<(OfflineDataset, AttackReport), PoisonError> {
    let n = ctx.dataset.n_transitions();
    let mut poisoned_indices = Vec::new();
    let mut max_ratio = 0.0_f64;
    for (i, (a, b)) in ctx.dataset.iter_transitions().zip(working.iter_transitions()).enumerate() {
        if bits_differ(a, b) {
            poisoned_indices.push(i);
            let ns = linf(&a.state);
            if ns > 0.0 {
                max_ratio = max_ratio.max(linf_diff(&a.state, &b.state) / ns);
            }
            let na = linf(&a.action);
            if na > 0.0 {
                max_ratio = max_ratio.max(linf_diff(&a.action, &b.action) / na);
            }
        }
    }
    let report = build_report(ctx, kind, &working, outcomes, poisoned_indices, n, max_ratio, warnings)?;
    Ok((working, report))
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    ctx: &AttackContext,
    kind: &str,
    poisoned: &OfflineDataset,
    outcomes: Vec<WindowOutcome>,
    poisoned_indices: Vec<usize>,
    clean_n: usize,
    max_ratio: f64,
    warnings: Vec<String>,
) -> Result<AttackReport, PoisonError> {
    let after_index = if poisoned.n_transitions() == 0 {
        None
    } else {
        let units = assign_units(poisoned, ctx.extractor, ctx.model)?;
        // A deletion attack can leave every surviving trajectory shorter
        // than l; treat that as "no patterns left".
        match extract_patterns(&units, ctx.index.l, ctx.index.dedup) {
            Ok(ix) => Some(ix),
            Err(PatternError::Argument(_)) => None,
        }
    };
    let rare_residual: BTreeMap<String, u64> = ctx
        .rare
        .patterns
        .iter()
        .map(|p| {
            (pattern_key(p), after_index.as_ref().map_or(0, |ix| ix.count_of(p)))
        })
        .collect();
    Ok(AttackReport {
        kind: kind.to_string(),
        poisoned_transitions: poisoned_indices.len(),
        poisoned_fraction: poisoned_indices.len() as f64 / clean_n as f64,
        poisoned_indices,
        windows: outcomes,
        rare_residual,
        max_perturbation_ratio: max_ratio,
        distinct_patterns_before: ctx.index.distinct_patterns(),
        distinct_patterns_after: after_index.as_ref().map_or(0, |ix| ix.distinct_patterns()),
        eta: ctx.budget.eta,
        n_candidates: ctx.budget.n_candidates,
        seed: ctx.budget.seed,
        l: ctx.index.l,
        dedup: ctx.index.dedup,
        budget: ctx.rare.budget,
        budget_used: ctx.rare.budget_used,
        warnings,
    })
}

/// The main attack: rewrites each rare-pattern window with the candidate
/// whose pattern is most frequent in the clean index. Ties prefer a
/// pattern different from the original, then the smallest candidate index.
pub fn csdpc_attack(ctx: &AttackContext) -> Result<(OfflineDataset, AttackReport), PoisonError> {
    ctx.budget.check()?;
    if ctx.rare.patterns.is_empty() {
        let warnings = vec!["empty rare set: attack is a no-op".to_string()];
        return finalize_same_shape(ctx, "csdpc", ctx.dataset.clone(), Vec::new(), warnings);
    }
    let (working, outcomes) = rewrite_windows(ctx, &ctx.rare.windows, true)?;
    finalize_same_shape(ctx, "csdpc", working, outcomes, Vec::new())
}

fn perturb_only(ctx: &AttackContext) -> Result<(OfflineDataset, AttackReport), PoisonError> {
    ctx.budget.check()?;
    if ctx.rare.patterns.is_empty() {
        let warnings = vec!["empty rare set: attack is a no-op".to_string()];
        return finalize_same_shape(ctx, "perturb_only", ctx.dataset.clone(), Vec::new(), warnings);
    }
    let (working, outcomes) = rewrite_windows(ctx, &ctx.rare.windows, false)?;
    finalize_same_shape(ctx, "perturb_only", working, outcomes, Vec::new())
}

fn delete_rare(ctx: &AttackContext) -> Result<(OfflineDataset, AttackReport), PoisonError> {
    let cut = footprint(&ctx.rare.windows);
    let offsets = ctx.dataset.trajectory_offsets();
    let mut deleted: Vec<usize> = cut
        .iter()
        .map(|(traj, step)| offsets[*traj as usize] + step)
        .collect();
    deleted.sort_unstable();

    // Record each window's clean pattern before the cut.
    let mut outcomes = Vec::new();
    let mut sorted: Vec<Window> = ctx.rare.windows.clone();
    sorted.sort();
    sorted.dedup();
    for w in &sorted {
        let traj = &ctx.dataset.trajectories[w.trajectory as usize];
        let slice = &traj.transitions[w.start..w.start + w.len];
        let (before, _) = evaluate_candidate(slice, ctx.extractor, ctx.model, ctx.index)?;
        outcomes.push(WindowOutcome {
            window: *w,
            before,
            after: DecisionPattern(Vec::new()),
            chosen_candidate: 0,
            max_ratio: 0.0,
        });
    }

    // Surviving runs of consecutive steps become their own trajectories.
    let mut trajectories = Vec::new();
    for (t, traj) in ctx.dataset.trajectories.iter().enumerate() {
        let mut segment: Vec<Transition> = Vec::new();
        for (s, tr) in traj.transitions.iter().enumerate() {
            if cut.contains(&(t as u64, s)) {
                if !segment.is_empty() {
                    trajectories.push(std::mem::take(&mut segment));
                }
            } else {
                segment.push(tr.clone());
            }
        }
        if !segment.is_empty() {
            trajectories.push(segment);
        }
    }
    let working = OfflineDataset {
        meta: ctx.dataset.meta.clone(),
        trajectories: trajectories
            .into_iter()
            .enumerate()
            .map(|(id, transitions)| Trajectory { id: id as u64, transitions })
            .collect(),
    };
    debug_assert_eq!(working.n_transitions(), ctx.dataset.n_transitions() - cut.len());

    let mut warnings = Vec::new();
    if ctx.rare.patterns.is_empty() {
        warnings.push("empty rare set: attack is a no-op".to_string());
    }
    let n = ctx.dataset.n_transitions();
    let report = build_report(ctx, "delete_rare", &working, outcomes, deleted, n, 0.0, warnings)?;
    Ok((working, report))
}

/// Greedy prefix of `ordered` whose distinct-transition union stays within
/// `target`; windows that would overflow are skipped, later ones may still
/// fit (same accounting as rare-set selection).
fn fill_to_footprint(ordered: &[Window], target: usize) -> Vec<Window> {
    let mut covered: BTreeSet<(u64, usize)> = BTreeSet::new();
    let mut chosen = Vec::new();
    for w in ordered {
        let mut tentative = covered.clone();
        tentative.extend(window_steps(w));
        if tentative.len() > target {
            continue;
        }
        covered = tentative;
        chosen.push(*w);
        if covered.len() == target {
            break;
        }
    }
    chosen
}

fn all_windows(index: &PatternIndex) -> Vec<Window> {
    let mut all: Vec<Window> = index.iter().flat_map(|(_, e)| e.windows.iter().copied()).collect();
    all.sort();
    all
}

fn random_target(ctx: &AttackContext) -> Result<(OfflineDataset, AttackReport), PoisonError> {
    ctx.budget.check()?;
    let target = footprint(&ctx.rare.windows).len();
    let mut all = all_windows(ctx.index);
    // Selection stream is namespaced away from the per-window streams.
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(ctx.budget.seed, 1 << 32));
    all.shuffle(&mut rng);
    let chosen = fill_to_footprint(&all, target);
    let mut warnings = Vec::new();
    if chosen.is_empty() {
        warnings.push("no windows fit the footprint target: attack is a no-op".to_string());
    }
    let (working, outcomes) = rewrite_windows(ctx, &chosen, true)?;
    let mut out = finalize_same_shape(ctx, "random_target", working, outcomes, warnings)?;
    out.1.budget_used = footprint(&chosen).len();
    Ok(out)
}

fn value_target(ctx: &AttackContext) -> Result<(OfflineDataset, AttackReport), PoisonError> {
    ctx.budget.check()?;
    let q = ctx.value_fn.ok_or_else(|| {
        PoisonError::Argument("value_target requires a trained value function".to_string())
    })?;
    let target = footprint(&ctx.rare.windows).len();
    let mut scored: Vec<(f64, Window)> = all_windows(ctx.index)
        .into_iter()
        .map(|w| {
            let traj = &ctx.dataset.trajectories[w.trajectory as usize];
            let sum: f64 = traj.transitions[w.start..w.start + w.len]
                .iter()
                .map(|tr| q.value(&tr.state, &tr.action))
                .sum();
            (sum, w)
        })
        .collect();
    // Highest summed Q first; equal scores keep ascending window order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let ordered: Vec<Window> = scored.into_iter().map(|(_, w)| w).collect();
    let chosen = fill_to_footprint(&ordered, target);
    let mut warnings = Vec::new();
    if chosen.is_empty() {
        warnings.push("no windows fit the footprint target: attack is a no-op".to_string());
    }
    let (working, outcomes) = rewrite_windows(ctx, &chosen, true)?;
    let mut out = finalize_same_shape(ctx, "value_target", working, outcomes, warnings)?;
    out.1.budget_used = footprint(&chosen).len();
    Ok(out)
}

/// Evenly spaced step indices across a trajectory of length `len`.
fn spread_steps(len: usize, l: usize) -> Vec<usize> {
    if l >= len {
        return (0..len).collect();
    }
    if l == 1 {
        return vec![len / 2];
    }
    let mut set = BTreeSet::new();
    for i in 0..l {
        set.insert(i * (len - 1) / (l - 1));
    }
    set.into_iter().collect()
}

/// Table-4 variant: each rare window's budget of `l` perturbed steps is
/// spent on isolated, evenly spaced steps of its trajectory instead of the
/// consecutive run. Spread steps get a single random perturbation (their
/// pattern is not a contiguous window, so occurrence selection does not
/// apply).
fn discrete_steps(ctx: &AttackContext) -> Result<(OfflineDataset, AttackReport), PoisonError> {
    ctx.budget.check()?;
    let mut windows: Vec<Window> = ctx.rare.windows.clone();
    windows.sort();
    windows.dedup();
    let mut working = ctx.dataset.clone();
    let mut written: BTreeSet<(u64, usize)> = BTreeSet::new();
    let mut outcomes = Vec::with_capacity(windows.len());
    let mut warnings = Vec::new();
    if windows.is_empty() {
        warnings.push("empty rare set: attack is a no-op".to_string());
    }
    for (ord, w) in windows.iter().enumerate() {
        let traj_len = working
            .trajectories
            .get(w.trajectory as usize)
            .ok_or_else(|| PoisonError::Argument(format!("window trajectory {} out of range", w.trajectory)))?
            .transitions
            .len();
        let before_slice: Vec<Transition> = working.trajectories[w.trajectory as usize].transitions
            [w.start..w.start + w.len]
            .to_vec();
        let (before, _) = evaluate_candidate(&before_slice, ctx.extractor, ctx.model, ctx.index)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(ctx.budget.seed, ord as u64));
        let mut max_ratio = 0.0_f64;
        for step in spread_steps(traj_len, w.len) {
            if written.contains(&(w.trajectory, step)) {
                continue;
            }
            let original = working.trajectories[w.trajectory as usize].transitions[step].clone();
            let perturbed = perturb_transition(&original, ctx.budget.eta, &mut rng);
            let ns = linf(&original.state);
            if ns > 0.0 {
                max_ratio = max_ratio.max(linf_diff(&perturbed.state, &original.state) / ns);
            }
            let na = linf(&original.action);
            if na > 0.0 {
                max_ratio = max_ratio.max(linf_diff(&perturbed.action, &original.action) / na);
            }
            working.trajectories[w.trajectory as usize].transitions[step] = perturbed;
            written.insert((w.trajectory, step));
        }
        let after_slice: Vec<Transition> = working.trajectories[w.trajectory as usize].transitions
            [w.start..w.start + w.len]
            .to_vec();
        let (after, _) = evaluate_candidate(&after_slice, ctx.extractor, ctx.model, ctx.index)?;
        outcomes.push(WindowOutcome {
            window: *w,
            before,
            after,
            chosen_candidate: 1,
            max_ratio,
        });
    }
    finalize_same_shape(ctx, "discrete_steps", working, outcomes, warnings)
}

/// Exhaustive post-attack stealth check: every transition either kept its
/// state/action bits or moved strictly less than eta times its clean
/// infinity norm, per field; rewards, next-states, and terminal flags must
/// be bit-identical. Returns the max observed ratio.
pub fn verify_stealth(
    clean: &OfflineDataset,
    poisoned: &OfflineDataset,
    eta: f64,
) -> Result<f64, PoisonError> {
    if clean.n_transitions() != poisoned.n_transitions() {
        return Err(PoisonError::Argument(
            "stealth check needs shape-preserving datasets".to_string(),
        ));
    }
    let mut max_ratio = 0.0_f64;
    for (i, (a, b)) in clean.iter_transitions().zip(poisoned.iter_transitions()).enumerate() {
        for (name, xa, xb) in [("state", &a.state, &b.state), ("action", &a.action, &b.action)] {
            let d = linf_diff(xa, xb);
            if d == 0.0 {
                continue;
            }
            let n = linf(xa);
            if !(d < eta * n) {
                return Err(PoisonError::Stealth(format!(
                    "transition {i} {name}: |delta| {d} vs bound {}",
                    eta * n
                )));
            }
            max_ratio = max_ratio.max(d / n);
        }
        if a.reward.to_bits() != b.reward.to_bits()
            || a.terminal != b.terminal
            || linf_diff(&a.next_state, &b.next_state) != 0.0
        {
            return Err(PoisonError::Stealth(format!(
                "transition {i}: reward/next_state/terminal modified"
            )));
        }
    }
    Ok(max_ratio)
}

/// Attacker's view of a dataset slice: patterns indexed and rare windows
/// identified from the visible transitions only, with window coordinates
/// translated back to the full dataset for rewriting. The budget stays a
/// fraction of the FULL dataset (capped by what the slice can hold).
pub fn restricted_patterns(
    units: &UnitSequence,
    access: &AccessWindow,
    l: usize,
    dedup: bool,
    rho: f64,
    n_total: usize,
    unit: BudgetUnit,
) -> Result<(PatternIndex, RareSet), PoisonError> {
    if access.length == 0 || access.end() > units.labels.len() {
        return Err(PoisonError::Argument(format!(
            "access window [{}, {}) outside dataset of {} transitions",
            access.start,
            access.end(),
            units.labels.len()
        )));
    }
    let mut labels = Vec::with_capacity(access.length);
    let mut boundaries = Vec::new();
    let mut map: Vec<(u64, usize)> = Vec::new();
    for (traj, (s, e)) in units.trajectory_ranges().into_iter().enumerate() {
        let lo = s.max(access.start);
        let hi = e.min(access.end());
        if lo >= hi {
            continue;
        }
        boundaries.push(labels.len());
        labels.extend_from_slice(&units.labels[lo..hi]);
        map.push((traj as u64, lo - s));
    }
    let clipped = UnitSequence { labels, boundaries };
    let index = extract_patterns(&clipped, l, dedup)?;
    let mut rare = identify_rare(&index, rho, n_total, unit)?;
    let translate = |w: &Window| Window {
        trajectory: map[w.trajectory as usize].0,
        start: w.start + map[w.trajectory as usize].1,
        len: w.len,
    };
    rare.windows = rare.windows.iter().map(translate).collect();
    Ok((index, rare))
}

/// A named, runtime-selectable attack.
pub trait AttackStrategy {
    fn name(&self) -> &'static str;
    fn run(&self, ctx: &AttackContext) -> Result<(OfflineDataset, AttackReport), PoisonError>;
}

macro_rules! strategy {
    ($ty:ident, $name:literal, $f:expr) => {
        struct $ty;
        impl AttackStrategy for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn run(&self, ctx: &AttackContext) -> Result<(OfflineDataset, AttackReport), PoisonError> {
                $f(ctx)
            }
        }
    };
}

fn no_attack(ctx: &AttackContext) -> Result<(OfflineDataset, AttackReport), PoisonError> {
    finalize_same_shape(ctx, "none", ctx.dataset.clone(), Vec::new(), Vec::new())
}

strategy!(NoneAttack, "none", no_attack);
strategy!(CsdpcStrategy, "csdpc", csdpc_attack);
strategy!(PerturbOnlyStrategy, "perturb_only", perturb_only);
strategy!(DeleteRareStrategy, "delete_rare", delete_rare);
strategy!(RandomTargetStrategy, "random_target", random_target);
strategy!(ValueTargetStrategy, "value_target", value_target);
strategy!(DiscreteStepsStrategy, "discrete_steps", discrete_steps);

pub const ATTACK_KINDS: [&str; 7] = [
    "none",
    "csdpc",
    "perturb_only",
    "delete_rare",
    "random_target",
    "value_target",
    "discrete_steps",
];

pub fn strategy_by_name(name: &str) -> Result<Box<dyn AttackStrategy>, PoisonError> {
    match name {
        "none" => Ok(Box::new(NoneAttack)),
        "csdpc" => Ok(Box::new(CsdpcStrategy)),
        "perturb_only" => Ok(Box::new(PerturbOnlyStrategy)),
        "delete_rare" => Ok(Box::new(DeleteRareStrategy)),
        "random_target" => Ok(Box::new(RandomTargetStrategy)),
        "value_target" => Ok(Box::new(ValueTargetStrategy)),
        "discrete_steps" => Ok(Box::new(DiscreteStepsStrategy)),
        _ => Err(PoisonError::Argument(format!(
            "unknown attack kind '{name}' (known: {})",
            ATTACK_KINDS.join(", ")
        ))),
    }
}

/// Dispatch for the non-CSDPC comparison attacks.
pub fn baseline_attack(
    ctx: &AttackContext,
    kind: &str,
) -> Result<(OfflineDataset, AttackReport), PoisonError> {
    match kind {
        "perturb_only" | "delete_rare" | "random_target" | "value_target" | "discrete_steps" => {
            strategy_by_name(kind)?.run(ctx)
        }
        _ => Err(PoisonError::Argument(format!("'{kind}' is not a baseline attack kind"))),
    }
}
