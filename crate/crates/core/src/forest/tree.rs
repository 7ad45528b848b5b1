//! Flat preorder tree storage and the deterministic sampling helpers shared
//! by the regression and causal forests.
//!
//! Determinism contract: every random draw comes from a ChaCha stream keyed
//! by (seed, stream id), where the stream id encodes the tree (or little-bag
//! group) index. Trees are therefore bit-identical regardless of how many
//! rayon workers execute them.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream id offset for residual-boosting trees.
pub(crate) const STREAM_BOOST: u64 = 1 << 40;
/// Stream id offset for little-bag group half-samples.
pub(crate) const STREAM_GROUP: u64 = 1 << 41;

/// Node of a binary split tree stored in preorder: a split's left child is
/// the next node in the array and the right child index is stored explicitly.
/// Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        right: u32,
    },
    /// Index into the tree's leaf payload array.
    Leaf { leaf: u32 },
}

/// Routes a point through `nodes` and returns its leaf payload index.
/// `feat(j)` must return the value of feature `j` for the point.
pub fn route<F: FnMut(usize) -> f64>(nodes: &[Node], mut feat: F) -> u32 {
    let mut i = 0usize;
    loop {
        match &nodes[i] {
            Node::Split {
                feature,
                threshold,
                right,
            } => {
                i = if feat(*feature as usize) <= *threshold {
                    i + 1
                } else {
                    *right as usize
                };
            }
            Node::Leaf { leaf } => return *leaf,
        }
    }
}

/// RNG for one tree (or group): a fixed seed with the index as the stream id.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples `k` of `n` indices without replacement, sorted ascending.
pub(crate) fn sample_sorted(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u32> {
    debug_assert!(k <= n);
    let mut out: Vec<u32> = rand::seq::index::sample(rng, n, k)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    out.sort_unstable();
    out
}

/// Feature indices to try at one node, sorted ascending so ties resolve to
/// the lowest feature index.
pub(crate) fn sample_features(rng: &mut ChaCha8Rng, d: usize, mtry: usize) -> Vec<usize> {
    let mut out: Vec<usize> = rand::seq::index::sample(rng, d, mtry.min(d)).into_vec();
    out.sort_unstable();
    out
}

pub(crate) fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    items.shuffle(rng);
}

/// Midpoint threshold between two consecutive distinct sorted values,
/// guarded so the split keeps the scanned boundary even when the values are
/// adjacent floats (routing uses `<=`).
pub(crate) fn midpoint_threshold(lo: f64, hi: f64) -> f64 {
    let thr = lo + (hi - lo) / 2.0;
    if thr >= hi {
        lo
    } else {
        thr
    }
}

/// Splits a row list (kept in ascending order) by a feature threshold.
pub(crate) fn partition_rows(rows: &[u32], column: &[f64], threshold: f64) -> (Vec<u32>, Vec<u32>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for &r in rows {
        if column[r as usize] <= threshold {
            left.push(r);
        } else {
            right.push(r);
        }
    }
    (left, right)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_walks_preorder_layout() {
        // split on feature 0 at 0.0; left leaf 0, right subtree splits on
        // feature 1 at 1.0 into leaves 1 and 2
        let nodes = vec![
            Node::Split {
                feature: 0,
                threshold: 0.0,
                right: 2,
            },
            Node::Leaf { leaf: 0 },
            Node::Split {
                feature: 1,
                threshold: 1.0,
                right: 4,
            },
            Node::Leaf { leaf: 1 },
            Node::Leaf { leaf: 2 },
        ];
        assert_eq!(route(&nodes, |_| -1.0), 0);
        assert_eq!(route(&nodes, |j| if j == 0 { 1.0 } else { 0.5 }), 1);
        assert_eq!(route(&nodes, |j| if j == 0 { 1.0 } else { 2.0 }), 2);
    }

    #[test]
    fn stream_rng_is_reproducible_and_stream_separated() {
        use rand::Rng;
        let a: u64 = stream_rng(7, 3).gen();
        let b: u64 = stream_rng(7, 3).gen();
        let c: u64 = stream_rng(7, 4).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn midpoint_threshold_never_swallows_the_right_value() {
        let lo = 1.0f64;
        let hi = lo + f64::EPSILON; // adjacent-ish floats
        let thr = midpoint_threshold(lo, hi);
        assert!(lo <= thr && thr < hi);
        // ordinary case is the arithmetic midpoint
        assert_eq!(midpoint_threshold(1.0, 3.0), 2.0);
    }

    #[test]
    fn sample_sorted_draws_without_replacement() {
        let mut rng = stream_rng(1, 0);
        let s = sample_sorted(&mut rng, 10, 5);
        assert_eq!(s.len(), 5);
        for w in s.windows(2) {
            assert!(w[0] < w[1]);
        }
    }
}
