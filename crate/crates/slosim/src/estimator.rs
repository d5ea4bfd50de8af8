//! Response-length upper bounds from a quantile regression forest.
//!
//! Following Meinshausen's construction, each regression tree keeps the raw
//! training targets in its leaves; a prediction pools the query's leaf from
//! every tree into one weighted empirical distribution (each tree contributes
//! total weight 1/n_trees, split evenly over its leaf samples) and reads off
//! a quantile. High quantiles give conservative "the response will be at most
//! this long" bounds; the bound is re-issued as generation progresses because
//! `generated_so_far` is itself a feature.

use crate::core::Request;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Error, Debug, PartialEq)]
pub enum EstimatorError {
    #[error("dataset too small: {got} rows, need at least {need}")]
    InsufficientData { got: usize, need: usize },
    #[error("forest is not fitted")]
    NotFitted,
    #[error("unsupported forest format version {0}")]
    BadVersion(u32),
    #[error("quantile must lie in (0, 1), got {0}")]
    BadQuantile(f64),
}

// ── Features ────────────────────────────────────────────────────────────────

/// Scheduler-visible request features standing in for prompt content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub input_len: u32,
    pub app_tag: String,
    pub generated_so_far: u32,
    /// 0 for non-compound requests.
    pub stage_index: u32,
    pub model_id: u32,
}

impl FeatureVector {
    pub fn from_request(req: &Request) -> Self {
        FeatureVector {
            input_len: req.input_len,
            app_tag: req.app_tag.clone(),
            generated_so_far: req.generated,
            stage_index: 0,
            model_id: 0,
        }
    }

    /// Numeric encoding: dense columns then a one-hot block for app_tag.
    fn encode(&self, vocab: &BTreeMap<String, usize>) -> Vec<f64> {
        let mut x = vec![
            f64::from(self.input_len),
            f64::from(self.generated_so_far),
            f64::from(self.stage_index),
            f64::from(self.model_id),
        ];
        let base = x.len();
        x.resize(base + vocab.len(), 0.0);
        if let Some(&i) = vocab.get(&self.app_tag) {
            x[base + i] = 1.0;
        }
        x
    }
}

/// Upper bound on a request's total output length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBound {
    /// Predicted total output tokens at quantile `q`, never below
    /// `as_of_generated`.
    pub total_upper: u32,
    pub q: f64,
    /// Tokens already generated when this bound was issued.
    pub as_of_generated: u32,
}

// ── Forest ──────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of features examined per split.
    pub feature_subsample: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 50,
            max_depth: 12,
            min_leaf: 5,
            feature_subsample: 0.7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
    /// Raw training targets routed here (total output lengths).
    Leaf { targets: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn leaf(&self, x: &[f64]) -> &[f32] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                TreeNode::Leaf { targets } => return targets,
            }
        }
    }
}

/// On-disk format version for serialized forests.
pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileForest {
    pub version: u32,
    pub params: ForestParams,
    tag_vocab: BTreeMap<String, usize>,
    trees: Vec<Tree>,
}

/// Fit a quantile regression forest on (features, true total length) rows.
pub fn fit_forest(
    dataset: &[(FeatureVector, u32)],
    params: ForestParams,
) -> Result<QuantileForest, EstimatorError> {
    let need = 10 * params.min_leaf;
    if dataset.len() < need {
        return Err(EstimatorError::InsufficientData {
            got: dataset.len(),
            need,
        });
    }
    let mut tag_vocab = BTreeMap::new();
    for (fv, _) in dataset {
        let next = tag_vocab.len();
        tag_vocab.entry(fv.app_tag.clone()).or_insert(next);
    }
    let rows: Vec<Vec<f64>> = dataset.iter().map(|(fv, _)| fv.encode(&tag_vocab)).collect();
    let targets: Vec<f32> = dataset.iter().map(|(_, y)| *y as f32).collect();
    let n_features = rows[0].len();
    let per_split = ((n_features as f64 * params.feature_subsample).ceil() as usize)
        .clamp(1, n_features);

    let mut trees = Vec::with_capacity(params.n_trees);
    for t in 0..params.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(t as u64 + 1)));
        let sample: Vec<u32> = (0..rows.len())
            .map(|_| rng.gen_range(0..rows.len()) as u32)
            .collect();
        let mut tree = Tree { nodes: Vec::new() };
        grow(
            &mut tree,
            &rows,
            &targets,
            sample,
            0,
            &params,
            per_split,
            n_features,
            &mut rng,
        );
        trees.push(tree);
    }
    Ok(QuantileForest {
        version: FOREST_FORMAT_VERSION,
        params,
        tag_vocab,
        trees,
    })
}

/// Recursively grow one CART regression tree; returns the new node's index.
#[allow(clippy::too_many_arguments)]
fn grow(
    tree: &mut Tree,
    rows: &[Vec<f64>],
    targets: &[f32],
    idx: Vec<u32>,
    depth: usize,
    params: &ForestParams,
    per_split: usize,
    n_features: usize,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let node_id = tree.nodes.len() as u32;
    tree.nodes.push(TreeNode::Leaf { targets: Vec::new() }); // placeholder

    // Leaf targets are kept sorted so quantile queries can binary-search them.
    let make_leaf = |idx: &[u32]| {
        let mut t: Vec<f32> = idx.iter().map(|&i| targets[i as usize]).collect();
        t.sort_unstable_by(f32::total_cmp);
        TreeNode::Leaf { targets: t }
    };

    if depth >= params.max_depth || idx.len() < 2 * params.min_leaf {
        tree.nodes[node_id as usize] = make_leaf(&idx);
        return node_id;
    }

    // Feature subset for this split, sampled without replacement.
    let mut feats: Vec<usize> = (0..n_features).collect();
    for i in 0..per_split {
        let j = rng.gen_range(i..n_features);
        feats.swap(i, j);
    }
    feats.truncate(per_split);

    // Best split = max reduction in sum of squared errors. With child sums
    // S_l, S_r over counts n_l, n_r, minimizing SSE is maximizing
    // S_l²/n_l + S_r²/n_r.
    let total_sum: f64 = idx.iter().map(|&i| f64::from(targets[i as usize])).sum();
    let n = idx.len() as f64;
    let base_score = total_sum * total_sum / n;
    let mut best: Option<(f64, usize, f64)> = None; // (score, feature, threshold)

    let mut order = idx.clone();
    for &f in &feats {
        order.sort_by(|&a, &b| {
            rows[a as usize][f]
                .partial_cmp(&rows[b as usize][f])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut left_sum = 0.0f64;
        for (k, &i) in order.iter().enumerate() {
            left_sum += f64::from(targets[i as usize]);
            let n_l = k + 1;
            let n_r = idx.len() - n_l;
            if n_l < params.min_leaf || n_r < params.min_leaf {
                continue;
            }
            let v = rows[i as usize][f];
            let v_next = rows[order[k + 1] as usize][f];
            if v == v_next {
                continue; // can't split between equal values
            }
            let right_sum = total_sum - left_sum;
            let score =
                left_sum * left_sum / n_l as f64 + right_sum * right_sum / n_r as f64;
            if score > base_score + 1e-9 && best.map_or(true, |(s, _, _)| score > s) {
                best = Some((score, f, 0.5 * (v + v_next)));
            }
        }
    }

    match best {
        None => {
            tree.nodes[node_id as usize] = make_leaf(&idx);
        }
        Some((_, f, threshold)) => {
            let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = idx
                .iter()
                .partition(|&&i| rows[i as usize][f] <= threshold);
            let left = grow(
                tree, rows, targets, left_idx, depth + 1, params, per_split, n_features, rng,
            );
            let right = grow(
                tree, rows, targets, right_idx, depth + 1, params, per_split, n_features, rng,
            );
            tree.nodes[node_id as usize] = TreeNode::Split {
                feature: f,
                threshold,
                left,
                right,
            };
        }
    }
    node_id
}

/// Weighted empirical quantile with linear interpolation between order
/// statistics (midpoint positions). `samples` need not be sorted (ties keep
/// their given order); weights need not be normalized. Test-only reference
/// for [`pooled_quantile`], which computes the same statistic over an
/// implicit pool without materializing it.
#[cfg(test)]
fn weighted_quantile(samples: &mut Vec<(f32, f64)>, q: f64) -> f64 {
    debug_assert!(!samples.is_empty());
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = samples.iter().map(|(_, w)| w).sum();
    let mut cum = 0.0;
    let mut prev_pos = f64::NEG_INFINITY;
    let mut prev_val = f64::from(samples[0].0);
    for &(v, w) in samples.iter() {
        let pos = (cum + w / 2.0) / total;
        if q <= pos {
            if prev_pos.is_finite() && pos > prev_pos {
                let frac = (q - prev_pos) / (pos - prev_pos);
                return prev_val + frac * (f64::from(v) - prev_val);
            }
            return f64::from(v);
        }
        cum += w;
        prev_pos = pos;
        prev_val = f64::from(v);
    }
    f64::from(samples.last().unwrap().0)
}

/// Per-value pool statistics for [`pooled_quantile`]: cumulative weight
/// strictly below `v`, cumulative weight up to and including `v`, and the
/// weights of the first and last leaf (in leaf order) containing `v`.
fn pool_stats(leaves: &[(&[f32], f64)], v: f32) -> (f64, f64, f64, f64) {
    let (mut lt, mut le, mut w_first, mut w_last) = (0.0, 0.0, 0.0, 0.0);
    for &(targets, w) in leaves {
        let a = targets.partition_point(|&x| x < v);
        let b = targets.partition_point(|&x| x <= v);
        lt += a as f64 * w;
        le += b as f64 * w;
        if b > a {
            if w_first == 0.0 {
                w_first = w;
            }
            w_last = w;
        }
    }
    (lt, le, w_first, w_last)
}

/// Largest pooled value ≤ `x` together with its group's cumulative weight
/// `W_le` and last-containing-leaf weight, in one pass. Per leaf, the count
/// of elements ≤ `x` equals the count ≤ the returned predecessor — nothing
/// in the pool lies strictly between them.
fn pool_pred_stats(leaves: &[(&[f32], f64)], x: f32) -> Option<(f32, f64, f64)> {
    let mut pred = f32::NEG_INFINITY;
    let (mut le, mut w_last) = (0.0, 0.0);
    let mut found = false;
    for &(targets, w) in leaves {
        let b = targets.partition_point(|&t| t <= x);
        le += b as f64 * w;
        if b > 0 {
            found = true;
            // A leaf containing `pred` has it as its own largest ≤ x element,
            // so comparing per-leaf maxima covers every occurrence.
            let v = targets[b - 1];
            if v >= pred {
                pred = v;
                w_last = w;
            }
        }
    }
    found.then_some((pred, le, w_last))
}


/// [`weighted_quantile`] over the implicit concatenation of per-leaf sorted
/// target arrays, each `(targets, per_sample_weight)`, via binary search in
/// value space — O(Σ log |leaf|) per probe instead of sorting the pool.
///
/// Midpoint-position semantics with ties in leaf order: the first sample with
/// position ≥ q is located by its value group; interior-of-group hits return
/// the group value, group-leading hits interpolate from the previous group.
fn pooled_quantile(leaves: &[(&[f32], f64)], q: f64) -> f64 {
    debug_assert!(leaves.iter().all(|(t, w)| !t.is_empty() && *w > 0.0));
    let total: f64 = leaves.iter().map(|&(t, w)| t.len() as f64 * w).sum();
    let vmin = leaves
        .iter()
        .map(|&(t, _)| t[0])
        .min_by(f32::total_cmp)
        .expect("non-empty leaf set");
    let vmax = leaves
        .iter()
        .map(|&(t, _)| *t.last().unwrap())
        .max_by(f32::total_cmp)
        .expect("non-empty leaf set");

    // Position of the last sample of a value group (midpoint rule).
    let p_last = |le: f64, w_last: f64| (le - w_last / 2.0) / total;
    let (_, le_max, wl_max) = pool_stats_at(leaves, vmax);
    if q > p_last(le_max, wl_max) {
        return f64::from(vmax); // past the last midpoint: clamp to the max
    }

    // Smallest pooled value whose group still has a member position ≥ q.
    // Lengths are non-negative, so f32 bit patterns order like the values.
    let (mut lo, mut hi) = (vmin.to_bits(), vmax.to_bits());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        match pool_pred_stats(leaves, f32::from_bits(mid)) {
            Some((_, le, wl)) if p_last(le, wl) >= q => hi = mid,
            _ => lo = mid + 1,
        }
    }
    let (v_star, _, _) =
        pool_pred_stats(leaves, f32::from_bits(lo)).expect("bounded by vmax");

    let (lt, _, w_first, _) = pool_stats(leaves, v_star);
    let p_first = (lt + w_first / 2.0) / total;
    if q > p_first {
        // The boundary sample has a same-valued predecessor: no interpolation.
        return f64::from(v_star);
    }
    match pool_pred_stats(leaves, f32::from_bits(v_star.to_bits().wrapping_sub(1))) {
        None => f64::from(v_star), // first sample of the whole pool
        Some((v_prev, le_prev, w_last_prev)) => {
            let p_prev = p_last(le_prev, w_last_prev);
            let frac = (q - p_prev) / (p_first - p_prev);
            f64::from(v_prev) + frac * (f64::from(v_star) - f64::from(v_prev))
        }
    }
}

/// [`pool_pred_stats`] for a value known to be present in the pool.
fn pool_stats_at(leaves: &[(&[f32], f64)], v: f32) -> (f32, f64, f64) {
    pool_pred_stats(leaves, v).expect("value present in pool")
}

impl QuantileForest {
    /// Predict the `q`-quantile of total output length for `features`,
    /// clamped below by `generated_so_far`.
    pub fn predict_upper(
        &self,
        features: &FeatureVector,
        q: f64,
    ) -> Result<LengthBound, EstimatorError> {
        Ok(self.predict_quantiles(features, &[q])?.pop().unwrap())
    }

    /// Predict several quantiles at once. The leaf pool does not depend on
    /// `q`, so this gathers and sorts it once — the dominant per-query cost —
    /// and reads every requested quantile from the same order statistics.
    pub fn predict_quantiles(
        &self,
        features: &FeatureVector,
        qs: &[f64],
    ) -> Result<Vec<LengthBound>, EstimatorError> {
        if self.trees.is_empty() {
            return Err(EstimatorError::NotFitted);
        }
        for &q in qs {
            if !(q > 0.0 && q < 1.0) {
                return Err(EstimatorError::BadQuantile(q));
            }
        }
        let x = features.encode(&self.tag_vocab);
        let tree_w = 1.0 / self.trees.len() as f64;
        let leaves: Vec<(&[f32], f64)> = self
            .trees
            .iter()
            .map(|t| {
                let leaf = t.leaf(&x);
                (leaf, tree_w / leaf.len() as f64)
            })
            .collect();
        Ok(qs
            .iter()
            .map(|&q| {
                let raw = pooled_quantile(&leaves, q);
                let total_upper = (raw.ceil() as i64).max(0) as u32;
                LengthBound {
                    total_upper: total_upper.max(features.generated_so_far),
                    q,
                    as_of_generated: features.generated_so_far,
                }
            })
            .collect())
    }

    /// Re-issue the bound once at least `refine_interval` tokens were
    /// generated since it was last anchored; otherwise return it unchanged.
    pub fn refine(
        &self,
        req: &Request,
        current: LengthBound,
        refine_interval: u32,
    ) -> Result<LengthBound, EstimatorError> {
        debug_assert!(req.generated >= current.as_of_generated);
        if req.generated - current.as_of_generated < refine_interval {
            return Ok(current);
        }
        self.predict_upper(&FeatureVector::from_request(req), current.q)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EstimatorError> {
        let mut forest: QuantileForest =
            serde_json::from_str(s).map_err(|_| EstimatorError::NotFitted)?;
        if forest.version != FOREST_FORMAT_VERSION {
            return Err(EstimatorError::BadVersion(forest.version));
        }
        if forest.trees.is_empty() || forest.trees.iter().any(|t| t.nodes.is_empty()) {
            return Err(EstimatorError::NotFitted);
        }
        // Restore the sorted-leaf invariant quantile queries rely on; stored
        // forests are not trusted to uphold it.
        for tree in &mut forest.trees {
            for node in &mut tree.nodes {
                if let TreeNode::Leaf { targets } = node {
                    targets.sort_unstable_by(f32::total_cmp);
                }
            }
        }
        Ok(forest)
    }
}

// ── Engine-facing estimator modes ───────────────────────────────────────────

/// Length estimator the engine consults: a fitted forest, or ground truth for
/// oracle baselines and worst-case reproductions (labelled as such — real
/// schedulers never see `true_output_len`).
#[derive(Clone, Debug)]
pub enum Estimator {
    Oracle,
    Forest(QuantileForest),
}

impl Estimator {
    /// Upper bound used by scheduling. `truth` is supplied by the engine; the
    /// forest path ignores it.
    pub fn bound(&self, features: &FeatureVector, q: f64, truth: u32) -> LengthBound {
        match self {
            Estimator::Oracle => LengthBound {
                total_upper: truth.max(features.generated_so_far),
                q: 1.0,
                as_of_generated: features.generated_so_far,
            },
            Estimator::Forest(forest) => forest
                .predict_upper(features, q)
                .expect("fitted forest with q in (0,1)"),
        }
    }

    /// Median prediction for shortest-predicted-first baselines.
    pub fn median_total(&self, features: &FeatureVector, truth: u32) -> u32 {
        match self {
            Estimator::Oracle => truth,
            Estimator::Forest(forest) => {
                forest
                    .predict_upper(features, 0.5)
                    .expect("fitted forest")
                    .total_upper
            }
        }
    }

    /// [`Estimator::bound`] and [`Estimator::median_total`] in one call,
    /// sharing the forest's leaf pool between the two quantiles.
    pub fn estimate(&self, features: &FeatureVector, q: f64, truth: u32) -> (LengthBound, u32) {
        match self {
            Estimator::Oracle => (self.bound(features, q, truth), truth),
            Estimator::Forest(forest) => {
                let both = forest
                    .predict_quantiles(features, &[q, 0.5])
                    .expect("fitted forest with q in (0,1)");
                (both[0], both[1].total_upper)
            }
        }
    }
}

/// Expand completed requests into training rows with progress snapshots every
/// `interval` tokens, so `generated_so_far` carries signal at fit time and
/// refinement actually conditions on progress. Snapshots per request are
/// capped to bound dataset growth on very long outputs.
pub fn snapshot_rows(
    completed: &[(FeatureVector, u32)],
    interval: u32,
    max_snapshots: usize,
) -> Vec<(FeatureVector, u32)> {
    let mut rows = Vec::new();
    for (fv, total) in completed {
        let mut g = 0u32;
        let mut taken = 0usize;
        while g < *total && taken < max_snapshots {
            let mut snap = fv.clone();
            snap.generated_so_far = g;
            rows.push((snap, *total));
            g += interval;
            taken += 1;
        }
    }
    rows
}
