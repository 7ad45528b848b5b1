//! Honest causal forest on centered residuals, following the generalized
//! random forest construction: trees are grown on residualized data
//! (Ỹ = Y − ŷ, W̃ = W − ê), splits maximize heterogeneity of a local
//! treatment-effect gradient, and honesty keeps the rows that choose the
//! splits disjoint from the rows that populate the leaves.
//!
//! Cluster structure runs through everything here:
//! * subsampling draws whole clusters, never individual rows;
//! * the honesty partition assigns whole clusters to the split or the
//!   estimate side, so no cluster contributes to both;
//! * variance estimation groups trees into "little bags" that share a
//!   half-sample of clusters, which yields standard errors that account for
//!   within-cluster dependence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::forest::tree::{
    midpoint_threshold, partition_rows, route, sample_features, sample_sorted, shuffle,
    stream_rng, Node, STREAM_GROUP,
};
use crate::frame::AnalysisFrame;
use crate::params::ForestParams;
use crate::stats;
use crate::wls::wls_cluster;

/// Denominators Σ αᵢ W̃ᵢ² below this are treated as "no treatment variation".
const DEGENERATE_DENOMINATOR: f64 = 1e-12;
/// Variance estimates are floored here before taking the square root.
const VARIANCE_FLOOR: f64 = 1e-24;
/// Reported standard errors are never smaller than this.
const SE_FLOOR: f64 = 1e-12;

/// One honest tree: the split structure, the estimate-set rows that landed
/// in each leaf, and per-cluster bookkeeping of which clusters trained it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalTree {
    pub(crate) nodes: Vec<Node>,
    /// For each leaf, the estimate-set rows routed into it (row indices of
    /// the training frame, ascending).
    pub(crate) leaf_rows: Vec<Vec<u32>>,
    /// Whether each cluster was drawn into this tree's subsample.
    pub(crate) in_bag: Vec<bool>,
    /// Whether each cluster was assigned to the estimate side of the honesty
    /// partition (implies in-bag). Split-side clusters are in-bag and not
    /// estimate-bag.
    pub(crate) est_bag: Vec<bool>,
}

impl CausalTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_rows.len()
    }

    pub fn leaf_rows(&self) -> &[Vec<u32>] {
        &self.leaf_rows
    }

    pub fn in_bag_cluster(&self, cluster: usize) -> bool {
        self.in_bag[cluster]
    }

    pub fn est_bag_cluster(&self, cluster: usize) -> bool {
        self.est_bag[cluster]
    }

    /// Feature index of the root split, if the tree split at all. Useful for
    /// checking that a forest noticed a dominant heterogeneity driver.
    pub fn root_split_feature(&self) -> Option<u32> {
        match self.nodes.first() {
            Some(Node::Split { feature, .. }) => Some(*feature),
            _ => None,
        }
    }

    fn leaf_at(&self, x: impl FnMut(usize) -> f64) -> u32 {
        route(&self.nodes, x)
    }
}

/// Point estimates (and, when the forest was grown with grouped subsampling,
/// standard errors) of the conditional treatment effect at every training row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CateEstimates {
    /// Out-of-bag τ̂(xᵢ): each row is predicted only by trees whose
    /// subsample excluded the row's cluster.
    pub tau: Vec<f64>,
    /// Half-sampling standard errors per row; `None` when the forest was fit
    /// with `subsample_rate > 0.5` (grouping disabled).
    pub se: Option<Vec<f64>>,
    /// Plain average of `tau` over the training rows.
    pub tau_bar: f64,
}

/// One coefficient of the calibration regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationCoefficient {
    pub estimate: f64,
    pub standard_error: f64,
    pub t_stat: f64,
    /// Two-sided p-value against zero using a normal reference.
    pub p_value: f64,
}

/// Result of the best-linear-predictor calibration check: Ỹ is regressed on
/// `tau_bar·W̃` (mean forest prediction) and `(τ̂₋ᵢ − tau_bar)·W̃`
/// (differential forest prediction) with no intercept and cluster-robust
/// standard errors. A well-calibrated forest has both coefficients near one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mean_forest: CalibrationCoefficient,
    /// `None` when the forest predictions are (numerically) constant, in
    /// which case the differential term is dropped from the regression.
    pub differential: Option<CalibrationCoefficient>,
    pub tau_bar: f64,
    pub n_rows: usize,
    pub n_clusters: usize,
}

/// A user-specified tree structure for [`fit_forced_partition`]: the same
/// shape as a grown tree, but with splits dictated instead of searched.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<SpecNode>,
        right: Box<SpecNode>,
    },
    Leaf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalForest {
    pub trees: Vec<CausalTree>,
    pub params: ForestParams,
    pub seed: u64,
    /// Number of little-bag groups (0 when grouping is disabled because
    /// `subsample_rate > 0.5`).
    n_groups: usize,
    /// Trees per group (`ceil(num_trees / n_groups)`); tree `b` belongs to
    /// group `b / group_size`.
    group_size: usize,
    /// Per-group half-sample of clusters each group's trees subsample from.
    group_pools: Vec<Vec<u32>>,
    n_clusters: usize,
    n_rows: usize,
    n_features: usize,
}

/// Everything needed to reconstruct a fitted forest apart from its trees,
/// kept separate so model files can store one tree per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestSnapshot {
    pub params: ForestParams,
    pub seed: u64,
    pub n_trees: usize,
    pub n_groups: usize,
    pub group_size: usize,
    pub group_pools: Vec<Vec<u32>>,
    pub n_clusters: usize,
    pub n_rows: usize,
    pub n_features: usize,
}

impl CausalForest {
    /// Captures the non-tree state for persistence.
    pub fn snapshot(&self) -> ForestSnapshot {
        ForestSnapshot {
            params: self.params.clone(),
            seed: self.seed,
            n_trees: self.trees.len(),
            n_groups: self.n_groups,
            group_size: self.group_size,
            group_pools: self.group_pools.clone(),
            n_clusters: self.n_clusters,
            n_rows: self.n_rows,
            n_features: self.n_features,
        }
    }

    /// Rebuilds a forest from a snapshot plus its trees, re-validating every
    /// structural invariant so a corrupted or hand-edited model file cannot
    /// produce silently wrong estimates.
    pub fn restore(snapshot: ForestSnapshot, trees: Vec<CausalTree>) -> Result<CausalForest> {
        snapshot.params.validate()?;
        if trees.len() != snapshot.n_trees || trees.len() != snapshot.params.num_trees {
            return Err(Error::LengthMismatch {
                context: format!(
                    "forest snapshot promises {} trees (params say {}), got {}",
                    snapshot.n_trees,
                    snapshot.params.num_trees,
                    trees.len()
                ),
            });
        }
        let grouped = snapshot.params.subsample_rate <= 0.5;
        let coherent_grouping = if grouped {
            let g = (snapshot.params.num_trees as f64).sqrt().ceil() as usize;
            let group_size = snapshot.params.num_trees.div_ceil(g);
            let n_groups = snapshot.params.num_trees.div_ceil(group_size);
            snapshot.n_groups == n_groups
                && snapshot.group_size == group_size
                && snapshot.group_pools.len() == n_groups
        } else {
            snapshot.n_groups == 0 && snapshot.group_size == 0 && snapshot.group_pools.is_empty()
        };
        if !coherent_grouping {
            return Err(Error::Estimation(
                "forest snapshot grouping is inconsistent with its parameters".into(),
            ));
        }
        if snapshot
            .group_pools
            .iter()
            .any(|pool| pool.iter().any(|&c| c as usize >= snapshot.n_clusters))
        {
            return Err(Error::Estimation(
                "forest snapshot group pool references an unknown cluster".into(),
            ));
        }
        for (b, tree) in trees.iter().enumerate() {
            if tree.in_bag.len() != snapshot.n_clusters || tree.est_bag.len() != snapshot.n_clusters
            {
                return Err(Error::LengthMismatch {
                    context: format!(
                        "tree {b} tracks {} clusters, snapshot says {}",
                        tree.in_bag.len(),
                        snapshot.n_clusters
                    ),
                });
            }
            let n_leaves = tree.leaf_rows.len() as u32;
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        right,
                    } => {
                        if *feature as usize >= snapshot.n_features
                            || !threshold.is_finite()
                            || *right as usize >= tree.nodes.len()
                        {
                            return Err(Error::Estimation(format!(
                                "tree {b} has a malformed split node"
                            )));
                        }
                    }
                    Node::Leaf { leaf } => {
                        if *leaf >= n_leaves {
                            return Err(Error::Estimation(format!(
                                "tree {b} routes to a leaf without estimate rows"
                            )));
                        }
                    }
                }
            }
            if tree
                .leaf_rows
                .iter()
                .flatten()
                .any(|&r| r as usize >= snapshot.n_rows)
            {
                return Err(Error::Estimation(format!(
                    "tree {b} references a row beyond the training frame"
                )));
            }
        }
        Ok(CausalForest {
            trees,
            params: snapshot.params,
            seed: snapshot.seed,
            n_groups: snapshot.n_groups,
            group_size: snapshot.group_size,
            group_pools: snapshot.group_pools,
            n_clusters: snapshot.n_clusters,
            n_rows: snapshot.n_rows,
            n_features: snapshot.n_features,
        })
    }
}

/// Fits an honest causal forest on residualized data. `y_tilde` and
/// `w_tilde` must be aligned with the rows of `frame`; the raw treatment
/// column of `frame` is still consulted so that every leaf's estimate set
/// contains both treated and control rows.
pub fn fit_causal_forest(
    frame: &AnalysisFrame,
    y_tilde: &[f64],
    w_tilde: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<CausalForest> {
    params.validate()?;
    if params.boost_stages != 0 {
        return Err(Error::InvalidParam(
            "causal forests have no boost stage; set boost_stages = 0".into(),
        ));
    }
    if params.honesty_fraction == 0.0 && params.max_depth != Some(0) {
        return Err(Error::InvalidParam(
            "honesty_fraction = 0 leaves no rows to choose splits; it is only \
             valid with max_depth = 0"
                .into(),
        ));
    }
    check_residuals(frame, y_tilde, w_tilde)?;
    let n_clusters = frame.n_clusters();
    if n_clusters < 2 {
        return Err(Error::TooFewClusters {
            needed: 2,
            got: n_clusters,
        });
    }

    // Little bags: groups of trees sharing a half-sample of clusters, used
    // later for variance estimation. Only coherent when each tree's own
    // subsample fits inside a half-sample.
    let grouped = params.subsample_rate <= 0.5;
    let (n_groups, group_size, group_pools) = if grouped {
        let half = n_clusters / 2;
        if half < 2 {
            return Err(Error::TooFewClusters {
                needed: 4,
                got: n_clusters,
            });
        }
        let g = (params.num_trees as f64).sqrt().ceil() as usize;
        let group_size = params.num_trees.div_ceil(g);
        let n_groups = params.num_trees.div_ceil(group_size);
        let pools: Vec<Vec<u32>> = (0..n_groups)
            .map(|k| {
                let mut rng = stream_rng(seed, STREAM_GROUP + k as u64);
                sample_sorted(&mut rng, n_clusters, half)
            })
            .collect();
        (n_groups, group_size, pools)
    } else {
        (0, 0, Vec::new())
    };

    let all_clusters: Vec<u32> = (0..n_clusters as u32).collect();
    let want_global = ((params.subsample_rate * n_clusters as f64).floor() as usize).max(1);
    if params.honesty_fraction > 0.0 {
        let per_tree = if grouped {
            want_global.min(n_clusters / 2)
        } else {
            want_global.min(n_clusters)
        };
        if per_tree < 2 {
            return Err(Error::InvalidParam(format!(
                "honest trees need at least 2 subsampled clusters per tree, got {per_tree}; \
                 raise subsample_rate or provide more clusters"
            )));
        }
    }

    let trees: Vec<CausalTree> = (0..params.num_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let pool: &[u32] = if grouped {
                &group_pools[b / group_size]
            } else {
                &all_clusters
            };
            let take = want_global.min(pool.len());
            let picks = sample_sorted(&mut rng, pool.len(), take);
            let sampled: Vec<u32> = picks.iter().map(|&p| pool[p as usize]).collect();
            grow_causal_tree(frame, y_tilde, w_tilde, sampled, params, &mut rng)
        })
        .collect::<Result<_>>()?;

    Ok(CausalForest {
        trees,
        params: params.clone(),
        seed,
        n_groups,
        group_size,
        group_pools,
        n_clusters,
        n_rows: frame.n_rows(),
        n_features: frame.n_features(),
    })
}

/// Fits a single-tree "forest" whose structure is dictated by `spec` rather
/// than searched: every row is an estimate row, routed into the leaf the
/// spec assigns it. A leaf that receives no rows is an error.
pub fn fit_forced_partition(frame: &AnalysisFrame, spec: &SpecNode) -> Result<CausalForest> {
    let mut nodes = Vec::new();
    let mut n_leaves = 0u32;
    build_spec_nodes(spec, frame.n_features(), &mut nodes, &mut n_leaves)?;
    let mut leaf_rows: Vec<Vec<u32>> = vec![Vec::new(); n_leaves as usize];
    for i in 0..frame.n_rows() {
        let leaf = route(&nodes, |j| frame.xij(i, j));
        leaf_rows[leaf as usize].push(i as u32);
    }
    if let Some(empty) = leaf_rows.iter().position(|rows| rows.is_empty()) {
        return Err(Error::Estimation(format!(
            "forced partition leaf {empty} received no rows"
        )));
    }
    let tree = CausalTree {
        nodes,
        leaf_rows,
        in_bag: vec![true; frame.n_clusters()],
        est_bag: vec![true; frame.n_clusters()],
    };
    Ok(CausalForest {
        trees: vec![tree],
        params: ForestParams {
            num_trees: 1,
            min_leaf: 1,
            subsample_rate: 1.0,
            mtry: None,
            max_depth: None,
            honesty_fraction: 0.0,
            boost_stages: 0,
        },
        seed: 0,
        n_groups: 0,
        group_size: 0,
        group_pools: Vec::new(),
        n_clusters: frame.n_clusters(),
        n_rows: frame.n_rows(),
        n_features: frame.n_features(),
    })
}

fn build_spec_nodes(
    spec: &SpecNode,
    n_features: usize,
    nodes: &mut Vec<Node>,
    n_leaves: &mut u32,
) -> Result<()> {
    match spec {
        SpecNode::Leaf => {
            nodes.push(Node::Leaf { leaf: *n_leaves });
            *n_leaves += 1;
        }
        SpecNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            if *feature >= n_features {
                return Err(Error::InvalidParam(format!(
                    "forced partition splits on feature {feature}, frame has {n_features}"
                )));
            }
            if !threshold.is_finite() {
                return Err(Error::NonFinite {
                    context: "forced partition threshold".into(),
                });
            }
            let idx = nodes.len();
            nodes.push(Node::Split {
                feature: *feature as u32,
                threshold: *threshold,
                right: 0,
            });
            build_spec_nodes(left, n_features, nodes, n_leaves)?;
            let right_start = nodes.len() as u32;
            if let Node::Split { right: slot, .. } = &mut nodes[idx] {
                *slot = right_start;
            }
            build_spec_nodes(right, n_features, nodes, n_leaves)?;
        }
    }
    Ok(())
}

impl CausalForest {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Number of little-bag groups; zero means grouping (and hence variance
    /// estimation) is unavailable for this forest.
    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    /// Group a tree belongs to, when grouping is active.
    pub fn group_of(&self, tree: usize) -> Option<usize> {
        (self.n_groups > 0).then(|| tree / self.group_size)
    }

    /// The half-sample of clusters group `k` subsampled from.
    pub fn group_pool(&self, k: usize) -> &[u32] {
        &self.group_pools[k]
    }

    /// Forest weights αᵢ(x): how much each training row's residuals count
    /// when estimating at `x`. Each tree spreads weight 1/|leaf| over the
    /// estimate rows of the leaf containing `x`; weights are averaged over
    /// trees and normalized to sum to one. Returned sparse as
    /// `(row, weight)` pairs in ascending row order.
    pub fn weights(&self, x: &[f64]) -> Result<Vec<(u32, f64)>> {
        self.check_point(x)?;
        let mut dense = vec![0.0f64; self.n_rows];
        for tree in &self.trees {
            let leaf = tree.leaf_at(|j| x[j]) as usize;
            let rows = &tree.leaf_rows[leaf];
            let share = 1.0 / (self.trees.len() as f64 * rows.len() as f64);
            for &r in rows {
                dense[r as usize] += share;
            }
        }
        let total: f64 = dense.iter().sum();
        if total <= 0.0 {
            return Err(Error::Estimation(
                "forest weights vanished at the evaluation point".into(),
            ));
        }
        Ok(dense
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, w)| (i as u32, w / total))
            .collect())
    }

    /// τ̂(x) = Σᵢ αᵢ(x) Ỹᵢ W̃ᵢ / Σᵢ αᵢ(x) W̃ᵢ², the forest-weighted
    /// residual-on-residual slope at `x`.
    pub fn estimate_cate(&self, y_tilde: &[f64], w_tilde: &[f64], x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_lengths(y_tilde, w_tilde)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for tree in &self.trees {
            let (n, d) = leaf_moment(tree, y_tilde, w_tilde, tree.leaf_at(|j| x[j]));
            num += n;
            den += d;
        }
        ratio_or_degenerate(num, den, "evaluation point")
    }

    /// Per-tree, per-leaf mean moments (mean ỹw̃, mean w̃²) over each leaf's
    /// estimate rows. Computed once per estimation call so that per-row work
    /// is tree routing plus O(1) lookups instead of re-summing leaf rows.
    fn moment_table(&self, y_tilde: &[f64], w_tilde: &[f64]) -> Vec<Vec<(f64, f64)>> {
        self.trees
            .par_iter()
            .map(|tree| {
                (0..tree.leaf_rows.len())
                    .map(|leaf| leaf_moment(tree, y_tilde, w_tilde, leaf as u32))
                    .collect()
            })
            .collect()
    }

    /// Out-of-bag τ̂ at every training row: row `i` is estimated only by
    /// trees whose subsample excluded cluster(i), so its own data never
    /// builds the leaves it is averaged over.
    pub fn estimate_cate_oob(
        &self,
        frame: &AnalysisFrame,
        y_tilde: &[f64],
        w_tilde: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_frame(frame)?;
        self.check_lengths(y_tilde, w_tilde)?;
        let table = self.moment_table(y_tilde, w_tilde);
        (0..self.n_rows)
            .into_par_iter()
            .map(|i| {
                let c = frame.cluster()[i];
                let mut num = 0.0;
                let mut den = 0.0;
                let mut seen = false;
                for (tree, moments) in self.trees.iter().zip(&table) {
                    if tree.in_bag[c] {
                        continue;
                    }
                    seen = true;
                    let leaf = tree.leaf_at(|j| frame.xij(i, j));
                    let (n, d) = moments[leaf as usize];
                    num += n;
                    den += d;
                }
                if !seen {
                    return Err(Error::Estimation(format!(
                        "row {i} (cluster `{}`) has no out-of-bag tree",
                        frame.cluster_labels()[c]
                    )));
                }
                ratio_or_degenerate(num, den, &format!("out-of-bag row {i}"))
            })
            .collect()
    }

    /// Half-sampling ("little bags") variance of τ̂(x). The between-group
    /// variance of group-level estimates overstates sampling noise because
    /// each group holds finitely many trees; the average within-group
    /// variance of tree-level estimates, scaled by group size, corrects it:
    ///
    /// σ̂²(x) = Var_between − mean_k( Var_within_k / s_k ),
    ///
    /// floored at a tiny positive constant before the square root.
    pub fn estimate_variance(&self, y_tilde: &[f64], w_tilde: &[f64], x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_lengths(y_tilde, w_tilde)?;
        let leaves: Vec<u32> = self
            .trees
            .iter()
            .map(|t| t.leaf_at(|j| x[j]))
            .collect();
        self.variance_at(
            |b, leaf| leaf_moment(&self.trees[b], y_tilde, w_tilde, leaf),
            &leaves,
        )
    }

    fn variance_at<F>(&self, moment: F, leaves: &[u32]) -> Result<f64>
    where
        F: Fn(usize, u32) -> (f64, f64),
    {
        if self.n_groups < 2 {
            return Err(Error::Estimation(
                "variance estimation needs grouped subsampling (subsample_rate <= 0.5) \
                 and at least two groups"
                    .into(),
            ));
        }
        let mut group_taus = Vec::with_capacity(self.n_groups);
        let mut corrections = Vec::new();
        for k in 0..self.n_groups {
            let lo = k * self.group_size;
            let hi = ((k + 1) * self.group_size).min(self.trees.len());
            let mut num = 0.0;
            let mut den = 0.0;
            let mut taus = Vec::with_capacity(hi - lo);
            for b in lo..hi {
                let (n, d) = moment(b, leaves[b]);
                num += n;
                den += d;
                taus.push(ratio_or_degenerate(n, d, &format!("tree {b}"))?);
            }
            group_taus.push(ratio_or_degenerate(num, den, &format!("group {k}"))?);
            let s = taus.len();
            if s >= 2 {
                let mean = stats::mean(&taus);
                let within =
                    taus.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (s - 1) as f64;
                corrections.push(within / s as f64);
            }
        }
        let g = group_taus.len();
        let between_mean = stats::mean(&group_taus);
        let between = group_taus
            .iter()
            .map(|t| (t - between_mean) * (t - between_mean))
            .sum::<f64>()
            / (g - 1) as f64;
        let correction = if corrections.is_empty() {
            0.0
        } else {
            stats::mean(&corrections)
        };
        let sigma2 = (between - correction).max(VARIANCE_FLOOR);
        Ok(sigma2.sqrt().max(SE_FLOOR))
    }

    /// Out-of-bag point estimates at every training row plus, when grouping
    /// is active, a half-sampling standard error at each row. Each row is
    /// routed through the forest once; the point estimate averages only
    /// out-of-bag trees while the standard error draws on all groups.
    pub fn cate_estimates(
        &self,
        frame: &AnalysisFrame,
        y_tilde: &[f64],
        w_tilde: &[f64],
    ) -> Result<CateEstimates> {
        self.check_frame(frame)?;
        self.check_lengths(y_tilde, w_tilde)?;
        let table = self.moment_table(y_tilde, w_tilde);
        let want_se = self.n_groups >= 2;
        let b = self.trees.len();
        let rows: Result<Vec<(f64, Option<f64>)>> = (0..self.n_rows)
            .into_par_iter()
            .map(|i| {
                let mut leaves = Vec::with_capacity(b);
                let c = frame.cluster()[i];
                let mut num = 0.0;
                let mut den = 0.0;
                let mut seen = false;
                for (t, tree) in self.trees.iter().enumerate() {
                    let leaf = tree.leaf_at(|j| frame.xij(i, j));
                    leaves.push(leaf);
                    if tree.in_bag[c] {
                        continue;
                    }
                    seen = true;
                    let (n, d) = table[t][leaf as usize];
                    num += n;
                    den += d;
                }
                if !seen {
                    return Err(Error::Estimation(format!(
                        "row {i} (cluster `{}`) has no out-of-bag tree",
                        frame.cluster_labels()[c]
                    )));
                }
                let tau = ratio_or_degenerate(num, den, &format!("out-of-bag row {i}"))?;
                let se = if want_se {
                    Some(self.variance_at(|t, leaf| table[t][leaf as usize], &leaves)?)
                } else {
                    None
                };
                Ok((tau, se))
            })
            .collect();
        let rows = rows?;
        let tau: Vec<f64> = rows.iter().map(|(t, _)| *t).collect();
        let se = if want_se {
            Some(rows.iter().map(|(_, s)| s.unwrap_or(SE_FLOOR)).collect())
        } else {
            None
        };
        let tau_bar = stats::mean(&tau);
        Ok(CateEstimates { tau, se, tau_bar })
    }

    /// Runs the calibration regression on this forest's out-of-bag
    /// predictions. See [`calibration_from_predictions`].
    pub fn calibration_test(
        &self,
        frame: &AnalysisFrame,
        y_tilde: &[f64],
        w_tilde: &[f64],
    ) -> Result<CalibrationReport> {
        let tau = self.estimate_cate_oob(frame, y_tilde, w_tilde)?;
        calibration_from_predictions(frame, y_tilde, w_tilde, &tau)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::LengthMismatch {
                context: format!(
                    "evaluation point has {} features, forest expects {}",
                    x.len(),
                    self.n_features
                ),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "evaluation point".into(),
            });
        }
        Ok(())
    }

    fn check_lengths(&self, y_tilde: &[f64], w_tilde: &[f64]) -> Result<()> {
        if y_tilde.len() != self.n_rows || w_tilde.len() != self.n_rows {
            return Err(Error::LengthMismatch {
                context: format!(
                    "residual vectors ({}, {}) do not match the {} training rows",
                    y_tilde.len(),
                    w_tilde.len(),
                    self.n_rows
                ),
            });
        }
        Ok(())
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

/// Mean-forest / differential-forest calibration regression on externally
/// supplied predictions (typically out-of-bag): regress Ỹ on
/// `tau_bar·W̃` and `(τ̂ᵢ − tau_bar)·W̃` without intercept, clustered by the
/// frame's clusters. A mean-forest coefficient near one says the average
/// prediction level is right; a differential coefficient near one says the
/// predictions rank heterogeneity correctly. When the predictions are
/// numerically constant the differential column is dropped and reported as
/// `None`.
pub fn calibration_from_predictions(
    frame: &AnalysisFrame,
    y_tilde: &[f64],
    w_tilde: &[f64],
    tau_hat: &[f64],
) -> Result<CalibrationReport> {
    let n = frame.n_rows();
    if y_tilde.len() != n || w_tilde.len() != n || tau_hat.len() != n {
        return Err(Error::LengthMismatch {
            context: "calibration inputs must match the frame's rows".into(),
        });
    }
    let tau_bar = stats::mean(tau_hat);
    let tau_var = stats::population_variance(tau_hat);
    let mean_col: Vec<f64> = w_tilde.iter().map(|w| tau_bar * w).collect();
    let (columns, names): (Vec<Vec<f64>>, Vec<&str>) = if tau_var < VARIANCE_FLOOR {
        (vec![mean_col], vec!["mean_forest_prediction"])
    } else {
        let diff_col: Vec<f64> = tau_hat
            .iter()
            .zip(w_tilde)
            .map(|(t, w)| (t - tau_bar) * w)
            .collect();
        (
            vec![mean_col, diff_col],
            vec!["mean_forest_prediction", "differential_forest_prediction"],
        )
    };
    let fit = wls_cluster(
        &columns,
        &names,
        y_tilde,
        None,
        frame.cluster(),
        frame.n_clusters(),
    )?;
    let coef = |k: usize| -> CalibrationCoefficient {
        let estimate = fit.coefficients[k];
        let standard_error = fit.standard_errors[k];
        let t_stat = estimate / standard_error;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        CalibrationCoefficient {
            estimate,
            standard_error,
            t_stat,
            p_value: 2.0 * (1.0 - normal.cdf(t_stat.abs())),
        }
    };
    Ok(CalibrationReport {
        mean_forest: coef(0),
        differential: (columns.len() == 2).then(|| coef(1)),
        tau_bar,
        n_rows: n,
        n_clusters: frame.n_clusters(),
    })
}

/// Per-tree contribution to the weighted moments at a leaf:
/// (Σ ỹw̃ / |leaf|, Σ w̃² / |leaf|) over the leaf's estimate rows. Summing
/// these across trees reproduces the forest-weight estimator exactly,
/// because the overall 1/B factor cancels in the ratio.
fn leaf_moment(tree: &CausalTree, y_tilde: &[f64], w_tilde: &[f64], leaf: u32) -> (f64, f64) {
    let rows = &tree.leaf_rows[leaf as usize];
    let mut num = 0.0;
    let mut den = 0.0;
    for &r in rows {
        let w = w_tilde[r as usize];
        num += y_tilde[r as usize] * w;
        den += w * w;
    }
    let k = rows.len() as f64;
    (num / k, den / k)
}

fn ratio_or_degenerate(num: f64, den: f64, context: &str) -> Result<f64> {
    if den < DEGENERATE_DENOMINATOR {
        return Err(Error::DegenerateTreatment {
            context: format!("weighted treatment variation vanished at {context}"),
        });
    }
    Ok(num / den)
}

fn check_residuals(frame: &AnalysisFrame, y_tilde: &[f64], w_tilde: &[f64]) -> Result<()> {
    if y_tilde.len() != frame.n_rows() || w_tilde.len() != frame.n_rows() {
        return Err(Error::LengthMismatch {
            context: format!(
                "residual vectors ({}, {}) do not match the frame's {} rows",
                y_tilde.len(),
                w_tilde.len(),
                frame.n_rows()
            ),
        });
    }
    if y_tilde.iter().chain(w_tilde).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "centered residuals".into(),
        });
    }
    Ok(())
}

/// Grows one honest tree, re-drawing the honesty partition (with a doubled
/// minimum leaf size) up to three times if the estimate set comes out
/// degenerate — empty, or missing a raw treatment arm.
fn grow_causal_tree(
    frame: &AnalysisFrame,
    y_tilde: &[f64],
    w_tilde: &[f64],
    sampled: Vec<u32>,
    params: &ForestParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<CausalTree> {
    let n_clusters = frame.n_clusters();
    let mut min_leaf = params.min_leaf;
    let mut last_reason = String::new();
    for _attempt in 0..3 {
        let mut order = sampled.clone();
        shuffle(rng, &mut order);
        let n_split = split_cluster_count(order.len(), params.honesty_fraction);
        let (split_clusters, est_clusters) = order.split_at(n_split);

        let mut split_rows: Vec<u32> = Vec::new();
        for &c in split_clusters {
            split_rows.extend_from_slice(&frame.cluster_rows()[c as usize]);
        }
        split_rows.sort_unstable();
        let mut est_rows: Vec<u32> = Vec::new();
        for &c in est_clusters {
            est_rows.extend_from_slice(&frame.cluster_rows()[c as usize]);
        }
        est_rows.sort_unstable();

        if est_rows.is_empty() {
            last_reason = "estimate set received no rows".into();
            min_leaf *= 2;
            continue;
        }
        let treated = est_rows
            .iter()
            .filter(|&&r| frame.w()[r as usize] == 1.0)
            .count();
        if treated == 0 || treated == est_rows.len() {
            last_reason = "estimate set lacks a raw treatment arm".into();
            min_leaf *= 2;
            continue;
        }

        let mut in_bag = vec![false; n_clusters];
        let mut est_bag = vec![false; n_clusters];
        for &c in &sampled {
            in_bag[c as usize] = true;
        }
        for &c in est_clusters {
            est_bag[c as usize] = true;
        }
        let (nodes, leaf_rows) = grow_honest(
            frame, y_tilde, w_tilde, split_rows, est_rows, min_leaf, params, rng,
        );
        return Ok(CausalTree {
            nodes,
            leaf_rows,
            in_bag,
            est_bag,
        });
    }
    Err(Error::TreeGrowth {
        attempts: 3,
        reason: last_reason,
    })
}

/// Number of subsampled clusters assigned to the split side.
fn split_cluster_count(k: usize, honesty_fraction: f64) -> usize {
    if honesty_fraction == 0.0 {
        return 0;
    }
    let raw = (honesty_fraction * k as f64).round() as usize;
    raw.clamp(1, k.saturating_sub(1))
}

struct CausalWorkItem {
    split_rows: Vec<u32>,
    est_rows: Vec<u32>,
    depth: usize,
    patch: Option<usize>,
}

#[allow(clippy::too_many_arguments)]
fn grow_honest(
    frame: &AnalysisFrame,
    y_tilde: &[f64],
    w_tilde: &[f64],
    split_rows: Vec<u32>,
    est_rows: Vec<u32>,
    min_leaf: usize,
    params: &ForestParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<Node>, Vec<Vec<u32>>) {
    let mtry = params.mtry_for(frame.n_features());
    let mut nodes = Vec::new();
    let mut leaves: Vec<Vec<u32>> = Vec::new();
    let mut stack = vec![CausalWorkItem {
        split_rows,
        est_rows,
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
        let chosen = find_causal_split(
            frame, y_tilde, w_tilde, &item.split_rows, &item.est_rows, item.depth, min_leaf,
            mtry, params, rng,
        );
        match chosen {
            None => {
                nodes.push(Node::Leaf {
                    leaf: leaves.len() as u32,
                });
                leaves.push(item.est_rows);
            }
            Some((feature, threshold)) => {
                let idx = nodes.len();
                nodes.push(Node::Split {
                    feature,
                    threshold,
                    right: 0,
                });
                let col = frame.feature(feature as usize);
                let (split_l, split_r) = partition_rows(&item.split_rows, col, threshold);
                let (est_l, est_r) = partition_rows(&item.est_rows, col, threshold);
                stack.push(CausalWorkItem {
                    split_rows: split_r,
                    est_rows: est_r,
                    depth: item.depth + 1,
                    patch: Some(idx),
                });
                stack.push(CausalWorkItem {
                    split_rows: split_l,
                    est_rows: est_l,
                    depth: item.depth + 1,
                    patch: None,
                });
            }
        }
    }
    (nodes, leaves)
}

/// Chooses a split by the gradient-based heterogeneity criterion. Each split
/// row gets a pseudo-outcome
///
/// ρᵢ = (W̃ᵢ − W̄)(Ỹᵢ − Ȳ − τ̂·(W̃ᵢ − W̄)) / Var(W̃),
///
/// where τ̂ and the moments are node-local; the split maximizing
/// (Σ_L ρ)²/n_L + (Σ_R ρ)²/n_R is taken. A candidate must leave `min_leaf`
/// rows and both raw treatment arms on each side of both the split set and
/// the estimate set; failing the estimate-set check moves on to the next
/// best candidate (score descending, then feature, then threshold).
#[allow(clippy::too_many_arguments)]
fn find_causal_split(
    frame: &AnalysisFrame,
    y_tilde: &[f64],
    w_tilde: &[f64],
    split_rows: &[u32],
    est_rows: &[u32],
    depth: usize,
    min_leaf: usize,
    mtry: usize,
    params: &ForestParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Option<(u32, f64)> {
    if let Some(max_depth) = params.max_depth {
        if depth >= max_depth {
            return None;
        }
    }
    let n = split_rows.len();
    if n < 2 * min_leaf || est_rows.len() < 2 * min_leaf {
        return None;
    }

    // Node-local moments on the split set.
    let inv_n = 1.0 / n as f64;
    let mut w_bar = 0.0;
    let mut y_bar = 0.0;
    for &r in split_rows {
        w_bar += w_tilde[r as usize];
        y_bar += y_tilde[r as usize];
    }
    w_bar *= inv_n;
    y_bar *= inv_n;
    let mut sww = 0.0;
    let mut swy = 0.0;
    for &r in split_rows {
        let dw = w_tilde[r as usize] - w_bar;
        sww += dw * dw;
        swy += dw * (y_tilde[r as usize] - y_bar);
    }
    if sww <= 1e-24 {
        return None; // no treatment variation to exploit
    }
    let tau_node = swy / sww;
    let var_w = sww * inv_n;

    let rho: Vec<f64> = split_rows
        .iter()
        .map(|&r| {
            let dw = w_tilde[r as usize] - w_bar;
            dw * (y_tilde[r as usize] - y_bar - tau_node * dw) / var_w
        })
        .collect();
    let rho_total: f64 = rho.iter().sum();
    let treated_total = count_treated_total(frame, split_rows);

    let features = sample_features(rng, frame.n_features(), mtry);
    // (score, feature, threshold), best candidate per sampled feature.
    let mut candidates: Vec<(f64, u32, f64)> = Vec::new();
    let mut order: Vec<usize> = Vec::with_capacity(n);

    for &j in &features {
        let col = frame.feature(j);
        order.clear();
        order.extend(0..n);
        order.sort_unstable_by(|&a, &b| {
            col[split_rows[a] as usize].total_cmp(&col[split_rows[b] as usize])
        });
        let lo_val = col[split_rows[order[0]] as usize];
        let hi_val = col[split_rows[order[n - 1]] as usize];
        if lo_val == hi_val {
            continue;
        }
        let mut best: Option<(f64, f64)> = None;
        let mut rho_left = 0.0;
        let mut treated_left = 0usize;
        for k in 0..n - 1 {
            let r = split_rows[order[k]] as usize;
            rho_left += rho[order[k]];
            if frame.w()[r] == 1.0 {
                treated_left += 1;
            }
            let xv = col[r];
            let xn = col[split_rows[order[k + 1]] as usize];
            if xv == xn {
                continue;
            }
            let n_left = k + 1;
            let n_right = n - n_left;
            if n_left < min_leaf || n_right < min_leaf {
                continue;
            }
            let treated_right = treated_total - treated_left;
            if treated_left == 0
                || treated_left == n_left
                || treated_right == 0
                || treated_right == n_right
            {
                continue;
            }
            let rho_right = rho_total - rho_left;
            let score =
                rho_left * rho_left / n_left as f64 + rho_right * rho_right / n_right as f64;
            if best.map_or(true, |(s, _)| score > s) {
                best = Some((score, midpoint_threshold(xv, xn)));
            }
        }
        if let Some((score, threshold)) = best {
            candidates.push((score, j as u32, threshold));
        }
    }

    candidates.sort_unstable_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });

    for &(_, feature, threshold) in &candidates {
        let col = frame.feature(feature as usize);
        let (est_l, est_r) = partition_rows(est_rows, col, threshold);
        if est_l.len() < min_leaf || est_r.len() < min_leaf {
            continue;
        }
        if !has_both_arms(frame, &est_l) || !has_both_arms(frame, &est_r) {
            continue;
        }
        return Some((feature, threshold));
    }
    None
}

fn count_treated_total(frame: &AnalysisFrame, rows: &[u32]) -> usize {
    rows.iter()
        .filter(|&&r| frame.w()[r as usize] == 1.0)
        .count()
}

fn has_both_arms(frame: &AnalysisFrame, rows: &[u32]) -> bool {
    let treated = count_treated_total(frame, rows);
    treated > 0 && treated < rows.len()
}
