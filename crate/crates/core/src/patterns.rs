//! Sequence pattern mining over unit sequences: stride-1 windows within
//! trajectory boundaries, consecutive-duplicate merging, occurrence
//! counting, and rare-set selection under a poisoning budget.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::UnitSequence;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("{0}")]
    Argument(String),
}

/// A window's label sequence after optional merging of consecutive
/// duplicates. Ordering is lexicographic on the labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DecisionPattern(pub Vec<u32>);

impl DecisionPattern {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Merges consecutive duplicate labels when `dedup` is set; otherwise the
/// raw sequence is the pattern. Idempotent under dedup.
pub fn pattern_of(labels: &[u32], dedup: bool) -> DecisionPattern {
    assert!(!labels.is_empty(), "pattern of an empty window");
    if !dedup {
        return DecisionPattern(labels.to_vec());
    }
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    DecisionPattern(out)
}

/// A length-l slice of one trajectory's transitions, identified by the
/// trajectory id and the start offset within that trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub trajectory: u64,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub count: u64,
    pub windows: Vec<Window>,
}

/// Occurrence index: every window's pattern, with counts and locations.
/// Iteration order is lexicographic in the pattern labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternIndex {
    map: BTreeMap<DecisionPattern, PatternEntry>,
    total_windows: u64,
    pub l: usize,
    pub dedup: bool,
}

impl PatternIndex {
    pub fn iter(&self) -> impl Iterator<Item = (&DecisionPattern, &PatternEntry)> {
        self.map.iter()
    }

    pub fn total_windows(&self) -> u64 {
        self.total_windows
    }

    pub fn distinct_patterns(&self) -> usize {
        self.map.len()
    }

    pub fn get(&self, pattern: &DecisionPattern) -> Option<&PatternEntry> {
        self.map.get(pattern)
    }

    /// Occurrence count of a pattern; 0 when never seen.
    pub fn count_of(&self, pattern: &DecisionPattern) -> u64 {
        self.map.get(pattern).map_or(0, |e| e.count)
    }

    /// CSV of (pattern, count), patterns in lexicographic order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pattern,count\n");
        for (p, e) in &self.map {
            let labels: Vec<String> = p.0.iter().map(|l| l.to_string()).collect();
            out.push_str(&format!("{},{}\n", labels.join("-"), e.count));
        }
        out
    }

    /// JSON-friendly view including window locations.
    pub fn export(&self) -> PatternIndexExport {
        PatternIndexExport {
            l: self.l,
            dedup: self.dedup,
            total_windows: self.total_windows,
            patterns: self
                .map
                .iter()
                .map(|(p, e)| PatternExport {
                    labels: p.0.clone(),
                    count: e.count,
                    windows: e.windows.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternExport {
    pub labels: Vec<u32>,
    pub count: u64,
    pub windows: Vec<Window>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternIndexExport {
    pub l: usize,
    pub dedup: bool,
    pub total_windows: u64,
    pub patterns: Vec<PatternExport>,
}

/// Enumerates every stride-1 window of length `l` within each trajectory
/// (windows never span trajectory boundaries) and indexes the patterns.
pub fn extract_patterns(units: &UnitSequence, l: usize, dedup: bool) -> Result<PatternIndex, PatternError> {
    if l < 1 {
        return Err(PatternError::Argument("window length must be >= 1".to_string()));
    }
    let max_len = units
        .trajectory_ranges()
        .iter()
        .map(|(s, e)| e - s)
        .max()
        .unwrap_or(0);
    if l > max_len {
        return Err(PatternError::Argument(format!(
            "window length {l} exceeds longest trajectory ({max_len})"
        )));
    }
    let mut map: BTreeMap<DecisionPattern, PatternEntry> = BTreeMap::new();
    let mut total_windows = 0u64;
    for (traj, (start, end)) in units.trajectory_ranges().into_iter().enumerate() {
        if end - start < l {
            continue;
        }
        for w in 0..=(end - start - l) {
            let slice = &units.labels[start + w..start + w + l];
            let pattern = pattern_of(slice, dedup);
            let entry = map
                .entry(pattern)
                .or_insert_with(|| PatternEntry { count: 0, windows: Vec::new() });
            entry.count += 1;
            entry.windows.push(Window { trajectory: traj as u64, start: w, len: l });
            total_windows += 1;
        }
    }
    Ok(PatternIndex { map, total_windows, l, dedup })
}

/// What the poisoning budget rations: dataset transitions (the fraction the
/// attacker may touch) or raw window counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetUnit {
    Transitions,
    Windows,
}

/// Lowest-frequency patterns whose windows fit inside the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareSet {
    /// Ascending by count, ties broken lexicographically.
    pub patterns: Vec<DecisionPattern>,
    /// All windows of the selected patterns.
    pub windows: Vec<Window>,
    /// Distinct transitions (unit = Transitions) or windows (unit = Windows)
    /// consumed by the selection.
    pub budget_used: usize,
    pub budget: usize,
    pub unit: BudgetUnit,
    /// Set when nothing fit inside the budget.
    pub empty_warning: bool,
}

/// Greedily accumulates patterns in ascending-count order while the union
/// of their windows' distinct transitions (or window count) stays within
/// floor(rho · N). A pattern that does not fit is skipped and the scan
/// continues with the next one.
pub fn identify_rare(
    index: &PatternIndex,
    rho: f64,
    n_transitions: usize,
    unit: BudgetUnit,
) -> Result<RareSet, PatternError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(PatternError::Argument(format!("rho {rho} outside (0,1)")));
    }
    let budget = match unit {
        BudgetUnit::Transitions => (rho * n_transitions as f64).floor() as usize,
        BudgetUnit::Windows => (rho * index.total_windows() as f64).floor() as usize,
    };

    let mut ranked: Vec<(&DecisionPattern, &PatternEntry)> = index.iter().collect();
    ranked.sort_by(|a, b| a.1.count.cmp(&b.1.count).then_with(|| a.0.cmp(b.0)));

    let mut covered: BTreeSet<(u64, usize)> = BTreeSet::new();
    let mut patterns = Vec::new();
    let mut windows = Vec::new();
    let mut used_windows = 0usize;
    for (pattern, entry) in ranked {
        match unit {
            BudgetUnit::Transitions => {
                let mut tentative = covered.clone();
                for w in &entry.windows {
                    for step in w.start..w.start + w.len {
                        tentative.insert((w.trajectory, step));
                    }
                }
                if tentative.len() > budget {
                    continue;
                }
                covered = tentative;
            }
            BudgetUnit::Windows => {
                if used_windows + entry.windows.len() > budget {
                    continue;
                }
                used_windows += entry.windows.len();
            }
        }
        patterns.push(pattern.clone());
        windows.extend(entry.windows.iter().copied());
    }

    let budget_used = match unit {
        BudgetUnit::Transitions => covered.len(),
        BudgetUnit::Windows => used_windows,
    };
    Ok(RareSet {
        empty_warning: patterns.is_empty(),
        patterns,
        windows,
        budget_used,
        budget,
        unit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn units(labels: Vec<u32>, boundaries: Vec<usize>) -> UnitSequence {
        UnitSequence { labels, boundaries }
    }

    #[test]
    fn dedup_merges_adjacent_repeats() {
        assert_eq!(pattern_of(&[1, 1, 2, 2, 3], true), DecisionPattern(vec![1, 2, 3]));
        assert_eq!(pattern_of(&[4, 4, 4, 4, 4], true), DecisionPattern(vec![4]));
        assert_eq!(pattern_of(&[7], true), DecisionPattern(vec![7]));
        assert_eq!(pattern_of(&[1, 2, 1, 2], true), DecisionPattern(vec![1, 2, 1, 2]));
        assert_eq!(pattern_of(&[1, 1, 2], false), DecisionPattern(vec![1, 1, 2]));
    }

    #[test]
    fn ten_units_make_six_windows() {
        let u = units((0..10).collect(), vec![0]);
        let index = extract_patterns(&u, 5, true).unwrap();
        assert_eq!(index.total_windows(), 6);
        let counted: u64 = index.iter().map(|(_, e)| e.count).sum();
        assert_eq!(counted, 6);
    }

    #[test]
    fn windows_never_cross_trajectory_boundaries() {
        // Two trajectories of 4 and 3 labels; l=3 gives 2 + 1 windows.
        let u = units(vec![0, 1, 2, 3, 9, 8, 7], vec![0, 4]);
        let index = extract_patterns(&u, 3, false).unwrap();
        assert_eq!(index.total_windows(), 3);
        for (_, entry) in index.iter() {
            for w in &entry.windows {
                let (start, end) = if w.trajectory == 0 { (0, 4) } else { (4, 7) };
                assert!(w.start + w.len <= end - start);
            }
        }
        // The boundary-straddling sequence [3, 9, 8] must not appear.
        assert_eq!(index.count_of(&DecisionPattern(vec![3, 9, 8])), 0);
    }

    #[test]
    fn window_length_bounds_are_checked() {
        let u = units(vec![1, 2, 3], vec![0]);
        assert!(extract_patterns(&u, 0, true).is_err());
        assert!(extract_patterns(&u, 4, true).is_err());
        assert!(extract_patterns(&u, 3, true).is_ok());
    }

    #[test]
    fn short_trajectories_contribute_no_windows() {
        let u = units(vec![1, 2, 5, 5, 5, 5], vec![0, 2]);
        let index = extract_patterns(&u, 3, false).unwrap();
        // First trajectory (len 2) is skipped; second gives 2 windows.
        assert_eq!(index.total_windows(), 2);
    }

    #[test]
    fn dedup_is_idempotent() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let labels: Vec<u32> = (0..rng.gen_range(1..12)).map(|_| rng.gen_range(0..4)).collect();
            let once = pattern_of(&labels, true);
            let twice = pattern_of(&once.0, true);
            assert_eq!(once, twice);
            assert!(once.len() <= labels.len());
            for pair in once.0.windows(2) {
                assert_ne!(pair[0], pair[1]);
            }
        }
    }

    #[test]
    fn dedup_strictly_reduces_distinct_patterns_on_repeat_heavy_data() {
        // Runs of repeated labels with varying run lengths: raw windows
        // differ by phase, deduplicated ones collapse.
        let mut labels = Vec::new();
        for block in 0..30u32 {
            let label = block % 3;
            for _ in 0..(3 + block % 4) {
                labels.push(label);
            }
        }
        let n = labels.len();
        let u = units(labels, vec![0]);
        let raw = extract_patterns(&u, 5, false).unwrap();
        let dd = extract_patterns(&u, 5, true).unwrap();
        assert_eq!(raw.total_windows(), dd.total_windows());
        assert_eq!(raw.total_windows(), (n - 4) as u64);
        assert!(
            dd.distinct_patterns() < raw.distinct_patterns(),
            "dedup {} vs raw {}",
            dd.distinct_patterns(),
            raw.distinct_patterns()
        );
    }

    /// Index with controllable counts: pattern (i) occurs counts[i] times,
    /// each occurrence in its own trajectory so footprints never overlap.
    fn synthetic_index(counts: &[(u32, u64)], l: usize) -> (PatternIndex, usize) {
        let mut labels = Vec::new();
        let mut boundaries = Vec::new();
        for (label, count) in counts {
            for _ in 0..*count {
                boundaries.push(labels.len());
                labels.extend(std::iter::repeat(*label).take(l));
            }
        }
        let n = labels.len();
        (extract_patterns(&units(labels, boundaries), l, false).unwrap(), n)
    }

    #[test]
    fn rare_selection_orders_by_ascending_count() {
        let (index, n) = synthetic_index(&[(0, 100), (1, 5), (2, 1)], 2);
        // Budget floor(0.99*212) = 209 admits the count-1 and count-5
        // patterns (12 transitions); the count-100 pattern (200 more) is
        // skipped. Ascending count puts the rarest first.
        let rare = identify_rare(&index, 0.99, n, BudgetUnit::Transitions).unwrap();
        assert_eq!(
            rare.patterns,
            vec![DecisionPattern(vec![2, 2]), DecisionPattern(vec![1, 1])]
        );
        assert_eq!(rare.budget_used, 12);
        assert!(!rare.empty_warning);
    }

    #[test]
    fn budget_below_rarest_footprint_gives_empty_warning() {
        let (index, n) = synthetic_index(&[(0, 50), (1, 4)], 4);
        // floor(0.01 * 216) = 2 transitions, but the rarest pattern's
        // footprint is 4 windows x 4 = 16.
        let rare = identify_rare(&index, 0.01, n, BudgetUnit::Transitions).unwrap();
        assert!(rare.patterns.is_empty());
        assert!(rare.empty_warning);
        assert_eq!(rare.budget_used, 0);
    }

    #[test]
    fn equal_counts_tie_break_lexicographically() {
        let (index, n) = synthetic_index(&[(3, 1), (1, 1), (2, 1)], 2);
        let rare = identify_rare(&index, 0.4, n, BudgetUnit::Transitions).unwrap();
        // Budget floor(0.4*6) = 2 transitions: exactly one window fits, and
        // the lexicographically smallest equal-count pattern wins.
        assert_eq!(rare.patterns, vec![DecisionPattern(vec![1, 1])]);
        assert_eq!(rare.budget_used, 2);
    }

    #[test]
    fn footprint_never_exceeds_budget() {
        let (index, n) = synthetic_index(&[(0, 9), (1, 3), (2, 2), (3, 1)], 3);
        for rho in [0.05, 0.1, 0.2, 0.5, 0.9] {
            let rare = identify_rare(&index, rho, n, BudgetUnit::Transitions).unwrap();
            let budget = (rho * n as f64).floor() as usize;
            assert!(rare.budget_used <= budget, "rho {rho}");
            assert_eq!(rare.budget, budget);
        }
    }

    #[test]
    fn skipping_large_patterns_still_admits_smaller_later_ones() {
        // Counts: A(=0) once, B(=1) twice, C(=2) four times. Budget of 10
        // transitions (l=3): A fits (3), B fits (3+6=9), C (9+12=21) skipped.
        let (index, n) = synthetic_index(&[(2, 4), (1, 2), (0, 1)], 3);
        let rare = identify_rare(&index, 10.0 / n as f64, n, BudgetUnit::Transitions).unwrap();
        assert_eq!(rare.patterns.len(), 2);
        assert_eq!(rare.budget_used, 9);
    }

    #[test]
    fn window_budget_unit_counts_windows() {
        let (index, n) = synthetic_index(&[(0, 6), (1, 2)], 2);
        let rare = identify_rare(&index, 0.3, n, BudgetUnit::Windows).unwrap();
        // floor(0.3 * 8 windows) = 2: the two rare windows fit.
        assert_eq!(rare.patterns, vec![DecisionPattern(vec![1, 1])]);
        assert_eq!(rare.budget_used, 2);
    }

    #[test]
    fn overlapping_windows_count_transitions_once() {
        // Trajectory 1,2,3,4,5,6 with l=2: each singleton pattern's window
        // shares a transition with its neighbour, so the greedy union grows
        // by one transition per accepted pattern after the first.
        let u = units(vec![0, 0, 0, 0, 1, 2, 3, 4, 5, 6], vec![0, 4]);
        let index = extract_patterns(&u, 2, false).unwrap();
        let rare = identify_rare(&index, 0.45, 10, BudgetUnit::Transitions).unwrap();
        // Budget floor(0.45*10)=4. Count-1 patterns in lex order: (1,2)
        // covers 2 transitions, (2,3) adds 1 (overlap), (3,4) adds 1, then
        // (4,5) would reach 5 and is skipped, as is (0,0) at 8.
        assert_eq!(
            rare.patterns,
            vec![
                DecisionPattern(vec![1, 2]),
                DecisionPattern(vec![2, 3]),
                DecisionPattern(vec![3, 4])
            ]
        );
        assert_eq!(rare.budget_used, 4);
    }

    #[test]
    fn csv_and_export_are_ordered() {
        let (index, _) = synthetic_index(&[(2, 1), (0, 3), (1, 2)], 2);
        let csv = index.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "pattern,count");
        assert_eq!(lines[1], "0-0,3");
        assert_eq!(lines[2], "1-1,2");
        assert_eq!(lines[3], "2-2,1");
        let export = index.export();
        assert_eq!(export.patterns.len(), 3);
        assert_eq!(export.patterns[0].labels, vec![0, 0]);
        assert_eq!(export.total_windows, 6);
    }
}
