//! Turns continuous (state, action) pairs into discrete decision units:
//! feature extraction (z-score standardization, optionally reweighted by a
//! trained value function's sensitivities) followed by k-means, with
//! elbow-method selection of the cluster count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{OfflineDataset, Transition};
use crate::learners::StateActionValue;
use crate::sub_seed;

#[derive(Debug, Error)]
pub enum DiscretizeError {
    #[error("{0}")]
    Argument(String),
    #[error("{0}")]
    State(String),
}

/// Maps a raw (state, action) pair to the feature vector that k-means
/// clusters. Extraction is deterministic; all parameters are fixed at fit
/// time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureExtractor {
    /// z-scored concatenation of state and action.
    ConcatStandardized { means: Vec<f64>, scales: Vec<f64> },
    /// Standardization followed by a linear projection whose rows weight
    /// dimensions by a value function's local sensitivity.
    LearnedLinear {
        means: Vec<f64>,
        scales: Vec<f64>,
        /// rank × input_dim matrix applied to the standardized vector.
        projection: Vec<Vec<f64>>,
    },
}

fn concat(tr: &Transition) -> Vec<f64> {
    let mut x = tr.state.clone();
    x.extend_from_slice(&tr.action);
    x
}

fn fit_moments(dataset: &OfflineDataset) -> Result<(Vec<f64>, Vec<f64>), DiscretizeError> {
    let n = dataset.n_transitions();
    if n == 0 {
        return Err(DiscretizeError::Argument("empty dataset".to_string()));
    }
    let dim = dataset.meta.state_dim + dataset.meta.action_dim;
    let mut means = vec![0.0; dim];
    for tr in dataset.iter_transitions() {
        for (m, x) in means.iter_mut().zip(concat(tr)) {
            *m += x;
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut vars = vec![0.0; dim];
    for tr in dataset.iter_transitions() {
        for (v, (x, m)) in vars.iter_mut().zip(concat(tr).iter().zip(means.iter())) {
            *v += (x - m) * (x - m);
        }
    }
    let scales = vars
        .iter()
        .map(|v| {
            let sd = (v / n as f64).sqrt();
            // Constant dimensions standardize to 0 rather than dividing by 0.
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok((means, scales))
}

impl FeatureExtractor {
    pub fn fit_standardized(dataset: &OfflineDataset) -> Result<Self, DiscretizeError> {
        let (means, scales) = fit_moments(dataset)?;
        Ok(FeatureExtractor::ConcatStandardized { means, scales })
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureExtractor::ConcatStandardized { means, .. } => means.len(),
            FeatureExtractor::LearnedLinear { projection, .. } => projection.len(),
        }
    }

    /// Expected state_dim + action_dim of inputs.
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureExtractor::ConcatStandardized { means, .. }
            | FeatureExtractor::LearnedLinear { means, .. } => means.len(),
        }
    }

    pub fn extract(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let standardize = |means: &[f64], scales: &[f64]| -> Vec<f64> {
            let mut z = Vec::with_capacity(means.len());
            for (i, x) in state.iter().chain(action.iter()).enumerate() {
                z.push((x - means[i]) / scales[i]);
            }
            z
        };
        match self {
            FeatureExtractor::ConcatStandardized { means, scales } => standardize(means, scales),
            FeatureExtractor::LearnedLinear { means, scales, projection } => {
                let z = standardize(means, scales);
                projection
                    .iter()
                    .map(|row| row.iter().zip(z.iter()).map(|(w, x)| w * x).sum())
                    .collect()
            }
        }
    }

    pub fn extract_transition(&self, tr: &Transition) -> Vec<f64> {
        self.extract(&tr.state, &tr.action)
    }

    /// Extracts every transition of a dataset in order.
    pub fn extract_all(&self, dataset: &OfflineDataset) -> Vec<Vec<f64>> {
        dataset.iter_transitions().map(|tr| self.extract_transition(tr)).collect()
    }
}

/// Builds a `LearnedLinear` extractor from a trained value function: each
/// standardized dimension is weighted by the mean absolute central
/// difference of Q along it (probed at one standard deviation over a
/// strided transition sample), normalized to mean 1, and the `rank` most
/// sensitive dimensions are kept. A value function equally sensitive in
/// every dimension therefore reproduces plain standardization.
pub fn fit_learned_linear(
    dataset: &OfflineDataset,
    q: &dyn StateActionValue,
    rank: Option<usize>,
) -> Result<FeatureExtractor, DiscretizeError> {
    if !q.is_trained() {
        return Err(DiscretizeError::State("value function is not trained".to_string()));
    }
    let (means, scales) = fit_moments(dataset)?;
    let dim = means.len();
    let s_dim = dataset.meta.state_dim;
    let rank = rank.unwrap_or(dim).clamp(1, dim);

    let n = dataset.n_transitions();
    let stride = n.div_ceil(1024);
    let mut sensitivity = vec![0.0; dim];
    let mut probed = 0usize;
    for (i, tr) in dataset.iter_transitions().enumerate() {
        if i % stride != 0 {
            continue;
        }
        probed += 1;
        let x = concat(tr);
        for j in 0..dim {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[j] += scales[j];
            minus[j] -= scales[j];
            let qp = q.value(&plus[..s_dim], &plus[s_dim..]);
            let qm = q.value(&minus[..s_dim], &minus[s_dim..]);
            sensitivity[j] += (qp - qm).abs() / 2.0;
        }
    }
    for s in sensitivity.iter_mut() {
        *s /= probed as f64;
    }
    let mean_s: f64 = sensitivity.iter().sum::<f64>() / dim as f64;
    let weights: Vec<f64> = if mean_s > 0.0 {
        sensitivity.iter().map(|s| s / mean_s).collect()
    } else {
        vec![1.0; dim]
    };

    // Keep the `rank` highest-weight dimensions, scaled by their weight.
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| weights[j].partial_cmp(&weights[i]).unwrap().then(i.cmp(&j)));
    let mut kept: Vec<usize> = order.into_iter().take(rank).collect();
    kept.sort_unstable();
    let projection: Vec<Vec<f64>> = kept
        .iter()
        .map(|&j| {
            let mut row = vec![0.0; dim];
            row[j] = weights[j];
            row
        })
        .collect();
    Ok(FeatureExtractor::LearnedLinear { means, scales, projection })
}

/// A fitted k-means clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub centroids: Vec<Vec<f64>>,
    pub k: usize,
    /// Within-cluster sum of squared distances at convergence.
    pub inertia: f64,
    pub seed: u64,
    /// Empty-cluster repair events during fitting.
    pub repairs: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid index and squared distance; ties break to the lowest
/// index via strict comparison.
pub fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = dist2(&centroids[0], point);
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = dist2(c, point);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with k-means++ style seeding. Deterministic under a
/// fixed seed; inertia is asserted non-increasing every iteration (empty
/// clusters are reseeded at the point farthest from its centroid, which
/// also cannot increase inertia).
pub fn fit_kmeans(
    features: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansModel, DiscretizeError> {
    if k < 2 {
        return Err(DiscretizeError::Argument(format!("k = {k} must be >= 2")));
    }
    if features.len() < k {
        return Err(DiscretizeError::Argument(format!(
            "{} points cannot form {k} clusters",
            features.len()
        )));
    }
    let n = features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Seeding: first centroid uniform, the rest proportional to squared
    // distance from the chosen set.
    let mut centroids: Vec<Vec<f64>> = vec![features[rng.gen_range(0..n)].clone()];
    let mut min_d2: Vec<f64> = features.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = min_d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in min_d2.iter().enumerate() {
                u -= d;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(features[next].clone());
        for (d, p) in min_d2.iter_mut().zip(features.iter()) {
            *d = d.min(dist2(p, centroids.last().unwrap()));
        }
    }

    let dim = features[0].len();
    let mut assignment = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    let mut repairs = 0usize;
    for _ in 0..max_iters {
        // Assignment step.
        let mut inertia = 0.0;
        for (i, p) in features.iter().enumerate() {
            let (label, d) = nearest(&centroids, p);
            assignment[i] = label;
            inertia += d;
        }
        assert!(
            inertia <= prev_inertia + 1e-9 * (1.0 + prev_inertia.min(f64::MAX)),
            "inertia increased: {prev_inertia} -> {inertia}"
        );
        prev_inertia = inertia;

        // Update step.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &label) in features.iter().zip(assignment.iter()) {
            counts[label] += 1;
            for (s, x) in sums[label].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed at the point farthest from its current centroid.
                let far = (0..n)
                    .max_by(|&i, &j| {
                        let di = dist2(&features[i], &centroids[assignment[i]]);
                        let dj = dist2(&features[j], &centroids[assignment[j]]);
                        di.partial_cmp(&dj).unwrap()
                    })
                    .unwrap();
                repairs += 1;
                shift = shift.max(dist2(&centroids[c], &features[far]).sqrt());
                centroids[c] = features[far].clone();
                assignment[far] = c;
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(dist2(&centroids[c], &new).sqrt());
            centroids[c] = new;
        }
        if shift < tol {
            break;
        }
    }

    // Final inertia under the final centroids.
    let inertia = features.iter().map(|p| nearest(&centroids, p).1).sum();
    Ok(KMeansModel { centroids, k, inertia, seed, repairs })
}

/// One (k, inertia) sample of the elbow curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InertiaPoint {
    pub k: usize,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowSelection {
    pub k: usize,
    pub curve: Vec<InertiaPoint>,
    pub model: KMeansModel,
}

const ELBOW_RESTARTS: u64 = 4;

/// Fits k-means over [k_min, k_max] (best of a few seeded restarts per k)
/// and picks the k with the largest discrete curvature of the inertia
/// curve, i.e. the sharpest elbow; ties go to the smaller k.
pub fn elbow_select_k(
    features: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<ElbowSelection, DiscretizeError> {
    if k_min < 2 || k_max < k_min + 2 {
        return Err(DiscretizeError::Argument(format!(
            "elbow range [{k_min},{k_max}] must satisfy k_min >= 2 and k_max >= k_min+2"
        )));
    }
    let mut curve = Vec::new();
    let mut models = Vec::new();
    for k in k_min..=k_max {
        let mut best: Option<KMeansModel> = None;
        for r in 0..ELBOW_RESTARTS {
            let m = fit_kmeans(features, k, sub_seed(seed, (k as u64) << 8 | r), 200, 1e-8)?;
            if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
                best = Some(m);
            }
        }
        let best = best.unwrap();
        curve.push(InertiaPoint { k, inertia: best.inertia });
        models.push(best);
    }

    // Discrete curvature over interior points of the curve.
    let mut selected = k_min + 1;
    let mut best_curv = f64::NEG_INFINITY;
    for i in 1..curve.len() - 1 {
        let curv = curve[i - 1].inertia - 2.0 * curve[i].inertia + curve[i + 1].inertia;
        if curv > best_curv {
            best_curv = curv;
            selected = curve[i].k;
        }
    }
    let model = models[selected - k_min].clone();
    Ok(ElbowSelection { k: selected, curve, model })
}

/// Per-transition cluster labels aligned with the dataset's flattened
/// transition order, plus trajectory start offsets so windows can respect
/// episode boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub labels: Vec<u32>,
    pub boundaries: Vec<usize>,
}

impl UnitSequence {
    /// (start, end) label ranges, one per trajectory.
    pub fn trajectory_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.boundaries.len());
        for (i, &start) in self.boundaries.iter().enumerate() {
            let end = self.boundaries.get(i + 1).copied().unwrap_or(self.labels.len());
            out.push((start, end));
        }
        out
    }
}

pub fn assign_units(
    dataset: &OfflineDataset,
    extractor: &FeatureExtractor,
    model: &KMeansModel,
) -> Result<UnitSequence, DiscretizeError> {
    let dim = model.centroids.first().map_or(0, |c| c.len());
    if extractor.output_dim() != dim {
        return Err(DiscretizeError::Argument(format!(
            "extractor output dim {} != centroid dim {dim}",
            extractor.output_dim()
        )));
    }
    let labels = dataset
        .iter_transitions()
        .map(|tr| nearest(&model.centroids, &extractor.extract_transition(tr)).0 as u32)
        .collect();
    Ok(UnitSequence { labels, boundaries: dataset.trajectory_offsets() })
}
