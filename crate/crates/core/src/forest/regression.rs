//! Subsampled regression forests used for nuisance estimation: E[Y|X] and
//! E[W|X]. Subsampling is cluster-level (whole municipalities in or out of a
//! tree), which makes "leave one out" mean leave the whole cluster out: a
//! row's out-of-bag prediction averages exactly the trees whose subsample
//! excluded its cluster.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::tree::{
    self, midpoint_threshold, partition_rows, route, sample_features, sample_sorted, stream_rng,
    Node,
};
use crate::frame::AnalysisFrame;
use crate::params::ForestParams;

/// Which frame column a nuisance forest regresses on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestTarget {
    Outcome,
    Treatment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTree {
    pub(crate) nodes: Vec<Node>,
    pub(crate) leaf_values: Vec<f64>,
    /// In-bag flag per cluster id.
    pub(crate) in_bag: Vec<bool>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.leaf_values[route(&self.nodes, |j| x[j]) as usize]
    }

    pub fn predict_row(&self, frame: &AnalysisFrame, i: usize) -> f64 {
        self.leaf_values[route(&self.nodes, |j| frame.xij(i, j)) as usize]
    }

    pub fn in_bag_cluster(&self, cluster: usize) -> bool {
        self.in_bag[cluster]
    }
}

#[derive(Debug, Clone)]
pub struct RegressionForestModel {
    pub trees: Vec<RegressionTree>,
    /// Second-stage trees fit on out-of-bag residuals when
    /// `params.boost_stages == 1`; empty otherwise.
    pub boost_trees: Vec<RegressionTree>,
    pub params: ForestParams,
    pub seed: u64,
    pub target: ForestTarget,
    n_clusters: usize,
    n_rows: usize,
}

impl RegressionForestModel {
    /// Prediction at an arbitrary point, averaging every tree (plus the
    /// boost stage when present).
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut p = tree_mean(&self.trees, |t| t.predict(x));
        if !self.boost_trees.is_empty() {
            p += tree_mean(&self.boost_trees, |t| t.predict(x));
        }
        p
    }

    /// In-sample prediction for row `i` using every tree.
    pub fn predict_row(&self, frame: &AnalysisFrame, i: usize) -> f64 {
        let mut p = tree_mean(&self.trees, |t| t.predict_row(frame, i));
        if !self.boost_trees.is_empty() {
            p += tree_mean(&self.boost_trees, |t| t.predict_row(frame, i));
        }
        p
    }

    /// Out-of-bag predictions for every row of `frame`: each row averages
    /// only the trees whose cluster subsample excluded the row's cluster.
    pub fn predict_oob(&self, frame: &AnalysisFrame) -> Result<Vec<f64>> {
        self.check_frame(frame)?;
        let stage0 = oob_stage(&self.trees, frame)?;
        if self.boost_trees.is_empty() {
            return Ok(stage0);
        }
        let stage1 = oob_stage(&self.boost_trees, frame)?;
        Ok(stage0
            .into_iter()
            .zip(stage1)
            .map(|(a, b)| a + b)
            .collect())
    }

    /// Trees that did NOT train on the given cluster (per stage, first-stage
    /// trees only). Exposed for out-of-bag bookkeeping audits.
    pub fn oob_trees(&self, cluster: usize) -> Vec<usize> {
        self.trees
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.in_bag[cluster])
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    fn check_frame(&self, frame: &AnalysisFrame) -> Result<()> {
        if frame.n_rows() != self.n_rows || frame.n_clusters() != self.n_clusters {
            return Err(Error::LengthMismatch {
                context: format!(
                    "forest was fit on {} rows / {} clusters, frame has {} / {}",
                    self.n_rows,
                    self.n_clusters,
                    frame.n_rows(),
                    frame.n_clusters()
                ),
            });
        }
        Ok(())
    }
}

fn tree_mean<T>(trees: &[T], mut f: impl FnMut(&T) -> f64) -> f64 {
    let mut sum = 0.0;
    for t in trees {
        sum += f(t);
    }
    sum / trees.len() as f64
}

fn oob_stage(trees: &[RegressionTree], frame: &AnalysisFrame) -> Result<Vec<f64>> {
    (0..frame.n_rows())
        .into_par_iter()
        .map(|i| {
            let c = frame.cluster()[i];
            let mut sum = 0.0;
            let mut count = 0usize;
            for t in trees {
                if !t.in_bag[c] {
                    sum += t.predict_row(frame, i);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Estimation(format!(
                    "row {i} (cluster `{}`) has no out-of-bag tree",
                    frame.cluster_labels()[c]
                )));
            }
            Ok(sum / count as f64)
        })
        .collect()
}

/// Fits a cluster-subsampled regression forest on the selected target.
pub fn fit_regression_forest(
    frame: &AnalysisFrame,
    target: ForestTarget,
    params: &ForestParams,
    seed: u64,
) -> Result<RegressionForestModel> {
    let values = match target {
        ForestTarget::Outcome => frame.y(),
        ForestTarget::Treatment => frame.w(),
    };
    let mut model = fit_values(frame, values, params, seed)?;
    model.target = target;
    Ok(model)
}

/// Fits a regression forest on an arbitrary response aligned with `frame`.
/// The public entry points wrap this; the boost stage uses it directly for
/// out-of-bag residuals.
pub(crate) fn fit_values(
    frame: &AnalysisFrame,
    values: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<RegressionForestModel> {
    params.validate()?;
    if values.len() != frame.n_rows() {
        return Err(Error::LengthMismatch {
            context: format!(
                "target has {} rows, frame has {}",
                values.len(),
                frame.n_rows()
            ),
        });
    }
    if frame.n_clusters() < 2 {
        return Err(Error::TooFewClusters {
            needed: 2,
            got: frame.n_clusters(),
        });
    }

    let trees = fit_stage(frame, values, params, seed, 0)?;
    check_oob_coverage(&trees, frame, params)?;

    let boost_trees = if params.boost_stages == 1 {
        let stage0_oob = oob_stage(&trees, frame)?;
        let residuals: Vec<f64> = values
            .iter()
            .zip(&stage0_oob)
            .map(|(v, p)| v - p)
            .collect();
        let boost = fit_stage(frame, &residuals, params, seed, tree::STREAM_BOOST)?;
        check_oob_coverage(&boost, frame, params)?;
        boost
    } else {
        Vec::new()
    };

    Ok(RegressionForestModel {
        trees,
        boost_trees,
        params: params.clone(),
        seed,
        target: ForestTarget::Outcome,
        n_clusters: frame.n_clusters(),
        n_rows: frame.n_rows(),
    })
}

/// Every cluster must be out-of-bag somewhere once the forest is large
/// enough for that to be a near-certain event; a violation means the
/// subsampling is broken, so it is an error rather than a silent gap.
fn check_oob_coverage(
    trees: &[RegressionTree],
    frame: &AnalysisFrame,
    params: &ForestParams,
) -> Result<()> {
    if params.num_trees < 50 || params.subsample_rate > 0.5 {
        return Ok(());
    }
    for c in 0..frame.n_clusters() {
        if trees.iter().all(|t| t.in_bag[c]) {
            return Err(Error::Estimation(format!(
                "cluster `{}` is in-bag in every tree; no out-of-bag predictions possible",
                frame.cluster_labels()[c]
            )));
        }
    }
    Ok(())
}

fn fit_stage(
    frame: &AnalysisFrame,
    values: &[f64],
    params: &ForestParams,
    seed: u64,
    stream_base: u64,
) -> Result<Vec<RegressionTree>> {
    let n_clusters = frame.n_clusters();
    let take = ((params.subsample_rate * n_clusters as f64).floor() as usize).max(1);
    let mtry = params.mtry_for(frame.n_features());

    (0..params.num_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, stream_base + b as u64);
            let sampled = sample_sorted(&mut rng, n_clusters, take);
            let mut in_bag = vec![false; n_clusters];
            let mut rows: Vec<u32> = Vec::new();
            for &c in &sampled {
                in_bag[c as usize] = true;
                rows.extend_from_slice(&frame.cluster_rows()[c as usize]);
            }
            rows.sort_unstable();
            let (nodes, leaf_values) =
                grow_regression_tree(frame, values, rows, mtry, params, &mut rng);
            Ok(RegressionTree {
                nodes,
                leaf_values,
                in_bag,
            })
        })
        .collect()
}

struct RegWorkItem {
    rows: Vec<u32>,
    depth: usize,
    /// Node index whose `right` pointer should be set when this item is
    /// emitted (present only for right children).
    patch: Option<usize>,
}

/// Grows one CART regression tree in preorder with an explicit work stack
/// (right child pushed first so the left subtree is emitted immediately
/// after its parent).
fn grow_regression_tree(
    frame: &AnalysisFrame,
    values: &[f64],
    root_rows: Vec<u32>,
    mtry: usize,
    params: &ForestParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<Node>, Vec<f64>) {
    let mut nodes = Vec::new();
    let mut leaf_values = Vec::new();
    let mut stack = vec![RegWorkItem {
        rows: root_rows,
        depth: 0,
        patch: None,
    }];

    while let Some(item) = stack.pop() {
        if let Some(slot) = item.patch {
            let next = nodes.len() as u32;
            if let Node::Split { right, .. } = &mut nodes[slot] {
                *right = next;
            }
        }
        match find_regression_split(frame, values, &item.rows, item.depth, mtry, params, rng) {
            None => {
                let mean =
                    item.rows.iter().map(|&r| values[r as usize]).sum::<f64>()
                        / item.rows.len() as f64;
                nodes.push(Node::Leaf {
                    leaf: leaf_values.len() as u32,
                });
                leaf_values.push(mean);
            }
            Some((feature, threshold)) => {
                let idx = nodes.len();
                nodes.push(Node::Split {
                    feature,
                    threshold,
                    right: 0,
                });
                let (left, right) =
                    partition_rows(&item.rows, frame.feature(feature as usize), threshold);
                stack.push(RegWorkItem {
                    rows: right,
                    depth: item.depth + 1,
                    patch: Some(idx),
                });
                stack.push(RegWorkItem {
                    rows: left,
                    depth: item.depth + 1,
                    patch: None,
                });
            }
        }
    }
    (nodes, leaf_values)
}

/// Best split by sum-of-squares reduction. The response is centered on the
/// node mean before the prefix scan, which makes the criterion (and hence
/// the chosen splits) invariant to translating the target. Ties resolve to
/// the lowest feature index, then the lowest threshold.
fn find_regression_split(
    frame: &AnalysisFrame,
    values: &[f64],
    rows: &[u32],
    depth: usize,
    mtry: usize,
    params: &ForestParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<(u32, f64)> {
    let n = rows.len();
    if let Some(max_depth) = params.max_depth {
        if depth >= max_depth {
            return None;
        }
    }
    if n < 2 * params.min_leaf.max(1) {
        return None;
    }

    let node_mean = rows.iter().map(|&r| values[r as usize]).sum::<f64>() / n as f64;
    let node_sse: f64 = rows
        .iter()
        .map(|&r| {
            let d = values[r as usize] - node_mean;
            d * d
        })
        .sum();
    if node_sse <= 1e-24 {
        return None; // pure node
    }

    let features = sample_features(rng, frame.n_features(), mtry);
    let mut best: Option<(f64, u32, f64)> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);

    for &j in &features {
        let col = frame.feature(j);
        pairs.clear();
        pairs.extend(
            rows.iter()
                .map(|&r| (col[r as usize], values[r as usize] - node_mean)),
        );
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        if pairs[0].0 == pairs[n - 1].0 {
            continue; // constant within node
        }
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += pairs[k].1;
            if pairs[k].0 == pairs[k + 1].0 {
                continue; // can only split between distinct values
            }
            let n_left = k + 1;
            let n_right = n - n_left;
            if n_left < params.min_leaf || n_right < params.min_leaf {
                continue;
            }
            let right_sum = -left_sum; // centered values sum to ~0
            let score =
                left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64;
            if best.map_or(true, |(s, _, _)| score > s) {
                best = Some((
                    score,
                    j as u32,
                    midpoint_threshold(pairs[k].0, pairs[k + 1].0),
                ));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}
