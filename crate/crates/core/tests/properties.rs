//! Randomized invariant checks over the transform, statistics, inference,
//! and forest layers. Each property encodes a structural guarantee the rest
//! of the pipeline leans on (idempotence, composition, leave-one-out
//! blindness, order invariance), exercised on generated inputs rather than
//! hand-picked fixtures.

use proptest::prelude::*;

use hetfx_core::forest::tree::route;
use hetfx_core::oracle::oracle_ols;
use hetfx_core::stats;
use hetfx_core::transform::{arsinh, bandwidth_filter, mean_encode_cluster, standardize, subsample};
use hetfx_core::wls::ols_solve;
use hetfx_core::{
    clan, fit_causal_forest, rescale_dummy, AnalysisFrame, ColumnSpec, Error, ForestParams,
};

/// Assembles a frame whose cluster of row `i` is `i % n_clusters`, with a
/// cluster-constant margin and a deterministic ramp added to the feature so
/// it can never be constant (standardization rejects zero-variance columns).
fn build_frame(
    x1: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    n_clusters: usize,
    margin_by_cluster: &[f64],
) -> AnalysisFrame {
    let n = y.len();
    let x1: Vec<f64> = x1
        .into_iter()
        .enumerate()
        .map(|(i, v)| v + 0.125 * i as f64)
        .collect();
    let keys: Vec<String> = (0..n).map(|i| format!("m{}", i % n_clusters)).collect();
    let margin: Vec<f64> = (0..n).map(|i| margin_by_cluster[i % n_clusters]).collect();
    AnalysisFrame::from_parts(
        vec![ColumnSpec::continuous("x1")],
        vec![x1],
        y,
        w,
        &keys,
        margin,
        None,
    )
    .expect("generated frame parts are valid")
}

/// Provides (n_clusters, rows, x1, y, margins) with every cluster holding at
/// least `min_per` rows.
fn frame_parts(
    min_per: usize,
    max_per: usize,
) -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..=5, min_per..=max_per).prop_flat_map(|(k, per)| {
        let n = k * per;
        (
            Just(k),
            Just(n),
            prop::collection::vec(-50.0f64..50.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-20.0f64..20.0, k),
        )
    })
}

proptest! {
    #[test]
    fn arsinh_is_odd_and_strictly_increasing(a in -1.0e6f64..1.0e6, gap in 1.0e-3f64..1.0e3) {
        let b = a + gap;
        let fa = arsinh(a).unwrap();
        let fb = arsinh(b).unwrap();
        prop_assert!(fa < fb, "arsinh({a}) = {fa} not below arsinh({b}) = {fb}");
        let neg = arsinh(-a).unwrap();
        prop_assert!((neg + fa).abs() <= 1e-12 * (1.0 + fa.abs()), "arsinh is not odd at {a}");
    }

    #[test]
    fn standardizing_twice_equals_standardizing_once(
        (k, _n, x1, y, margins) in frame_parts(4, 8),
    ) {
        let n = y.len();
        let w: Vec<f64> = (0..n).map(|i| ((i / k) % 2) as f64).collect();
        let frame = build_frame(x1, y, w, k, &margins);
        let cols = vec!["x1".to_string()];
        let once = standardize(&frame, &cols).unwrap();
        let twice = standardize(&once, &cols).unwrap();
        for i in 0..n {
            prop_assert!(
                (once.feature(0)[i] - twice.feature(0)[i]).abs() <= 1e-10,
                "row {i} moved on re-standardization"
            );
        }
        let (m1, m2) = (&once.columns()[0], &twice.columns()[0]);
        prop_assert_eq!(m1.mean.to_bits(), m2.mean.to_bits(), "frozen mean changed");
        prop_assert_eq!(m1.sd.to_bits(), m2.sd.to_bits(), "frozen sd changed");
    }

    #[test]
    fn bandwidth_filters_compose_to_the_tighter_bandwidth(
        (k, _n, x1, y, margins) in frame_parts(4, 8),
        h1 in 0.5f64..12.0,
        h2 in 0.5f64..12.0,
    ) {
        let n = y.len();
        let w: Vec<f64> = (0..n).map(|i| ((i / k) % 2) as f64).collect();
        let frame = build_frame(x1, y, w, k, &margins);
        let sequential = bandwidth_filter(&frame, h1).and_then(|f| bandwidth_filter(&f, h2));
        let direct = bandwidth_filter(&frame, h1.min(h2));
        match (sequential, direct) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.n_rows(), b.n_rows());
                prop_assert_eq!(a.y(), b.y());
                prop_assert_eq!(a.margin(), b.margin());
            }
            (Err(Error::EmptyFrame { .. }), Err(Error::EmptyFrame { .. })) => {}
            (a, b) => prop_assert!(
                false,
                "composed and direct filters disagree: {a:?} vs {b:?}"
            ),
        }
    }

    #[test]
    fn mean_encoding_is_blind_to_the_encoded_rows_own_outcome(
        (k, n, x1, y, margins) in frame_parts(4, 8),
        row_pick in any::<prop::sample::Index>(),
        bump in prop_oneof![-100.0f64..-0.5, 0.5f64..100.0],
    ) {
        let w: Vec<f64> = (0..n).map(|i| ((i / k) % 2) as f64).collect();
        let frame = build_frame(x1.clone(), y.clone(), w.clone(), k, &margins);
        let encoded = mean_encode_cluster(&frame).unwrap();
        prop_assert_eq!(encoded.singleton_rows, 0);

        let i = row_pick.index(n);
        let mut y_bumped = y;
        y_bumped[i] += bump;
        let frame_bumped = build_frame(x1, y_bumped, w, k, &margins);
        let encoded_bumped = mean_encode_cluster(&frame_bumped).unwrap();

        let j_y = encoded.frame.column_index("cluster_y_loo").unwrap();
        let j_w = encoded.frame.column_index("cluster_w_loo").unwrap();
        prop_assert_eq!(
            encoded.frame.feature(j_y)[i].to_bits(),
            encoded_bumped.frame.feature(j_y)[i].to_bits(),
            "row {}'s outcome encoding saw its own outcome", i
        );
        prop_assert_eq!(
            encoded.frame.feature(j_w)[i].to_bits(),
            encoded_bumped.frame.feature(j_w)[i].to_bits(),
            "row {}'s treatment encoding changed without any treatment change", i
        );
    }

    #[test]
    fn clan_quartiles_survive_strictly_increasing_transforms(
        (k, n, x1, y, margins) in frame_parts(4, 10),
        tau_cents in prop::collection::vec(-10_000i32..10_000, 8..=50),
        a in 0.5f64..10.0,
        cubic in 0.0f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        let tau: Vec<f64> = (0..n).map(|i| tau_cents[i % tau_cents.len()] as f64 / 100.0).collect();
        let w: Vec<f64> = (0..n).map(|i| ((i / k) % 2) as f64).collect();
        let frame = build_frame(x1, y, w, k, &margins);
        let cols = vec!["x1".to_string()];
        let extras = vec![("aux".to_string(), frame.y().to_vec())];

        let base = clan(&frame, &tau, &cols, &extras).unwrap();
        let mapped: Vec<f64> = tau.iter().map(|t| a * t + cubic * t * t * t + shift).collect();
        let transformed = clan(&frame, &mapped, &cols, &extras).unwrap();

        prop_assert_eq!(base.quartile_sizes, transformed.quartile_sizes);
        for (f0, f1) in base
            .features
            .iter()
            .chain(base.extras.iter())
            .zip(transformed.features.iter().chain(transformed.extras.iter()))
        {
            for q in 0..4 {
                prop_assert_eq!(
                    f0.quartiles[q].mean.to_bits(),
                    f1.quartiles[q].mean.to_bits(),
                    "quartile {} of `{}` drifted under a monotone transform", q + 1, f0.name
                );
            }
            prop_assert_eq!(f0.gap.to_bits(), f1.gap.to_bits());
        }
    }

    #[test]
    fn histogram_counts_partition_the_sample(
        lo in -100.0f64..0.0,
        width in 1.0f64..50.0,
        fractions in prop::collection::vec(0.0f64..=1.0, 1..80),
        bins in 1usize..12,
    ) {
        let hi = lo + width;
        let values: Vec<f64> = fractions.iter().map(|f| lo + f * width).collect();
        let hist = stats::histogram(&values, lo, hi, bins).unwrap();
        prop_assert_eq!(hist.counts.iter().sum::<u64>(), values.len() as u64);
        prop_assert_eq!(hist.edges.len(), bins + 1);
        prop_assert_eq!(hist.mean.to_bits(), stats::mean(&values).to_bits());
        prop_assert_eq!(hist.sd.to_bits(), stats::population_sd(&values).to_bits());
    }

    #[test]
    fn pearson_is_bounded_and_ignores_positive_affine_maps(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 4..60),
        scale in 0.1f64..10.0,
        offset in -100.0f64..100.0,
    ) {
        let x: Vec<f64> = pairs.iter().enumerate().map(|(i, p)| p.0 + 0.25 * i as f64).collect();
        let y: Vec<f64> = pairs.iter().enumerate().map(|(i, p)| p.1 + 0.25 * i as f64).collect();
        let r = stats::pearson(&x, &y).unwrap();
        prop_assert!(r.abs() <= 1.0 + 1e-12, "correlation {r} escaped [-1, 1]");
        let x_mapped: Vec<f64> = x.iter().map(|v| scale * v + offset).collect();
        let r_mapped = stats::pearson(&x_mapped, &y).unwrap();
        prop_assert!(
            (r - r_mapped).abs() <= 1e-9,
            "correlation moved from {r} to {r_mapped} under an affine map"
        );
    }

    #[test]
    fn weighted_mean_stays_in_range_and_translates(
        entries in prop::collection::vec((-100.0f64..100.0, 0.1f64..10.0), 1..60),
        c in -1000.0f64..1000.0,
    ) {
        let values: Vec<f64> = entries.iter().map(|e| e.0).collect();
        let weights: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let wm = stats::weighted_mean(&values, &weights).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(wm >= lo - 1e-9 && wm <= hi + 1e-9, "{wm} outside [{lo}, {hi}]");
        let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
        let wm_shifted = stats::weighted_mean(&shifted, &weights).unwrap();
        prop_assert!(
            (wm_shifted - (wm + c)).abs() <= 1e-9 * (1.0 + wm.abs() + c.abs()),
            "translation broke the weighted mean: {wm_shifted} vs {}", wm + c
        );
    }

    #[test]
    fn dummy_rescaling_round_trips_and_cancels_in_t_statistics(
        per_flip in -1.0e6f64..1.0e6,
        se in 1.0e-6f64..1.0e3,
        p in 0.01f64..0.99,
    ) {
        let sd = (p * (1.0 - p)).sqrt();
        let standardized = per_flip * sd;
        let recovered = rescale_dummy(standardized, p).unwrap();
        prop_assert!(
            (recovered - per_flip).abs() <= 1e-12 * (1.0 + per_flip.abs()),
            "round trip {per_flip} -> {standardized} -> {recovered}"
        );
        let t_standardized = standardized / se;
        let t_rescaled = rescale_dummy(standardized, p).unwrap() / rescale_dummy(se, p).unwrap();
        prop_assert!(
            (t_standardized - t_rescaled).abs() <= 1e-12 * (1.0 + t_standardized.abs()),
            "t-statistic changed under rescaling: {t_standardized} vs {t_rescaled}"
        );
    }

    #[test]
    fn subsampling_keeps_exactly_the_predicate_rows(
        (k, n, x1, y, margins) in frame_parts(4, 8),
        mask_bits in prop::collection::vec(any::<bool>(), 8..=40),
    ) {
        let w: Vec<f64> = (0..n).map(|i| ((i / k) % 2) as f64).collect();
        let frame = build_frame(x1, y, w, k, &margins);
        let mut mask: Vec<bool> = (0..n).map(|i| mask_bits[i % mask_bits.len()]).collect();
        mask[0] = true; // keep the frame non-empty
        let kept = subsample(&frame, |i| mask[i]).unwrap();
        let expected: Vec<f64> = (0..n).filter(|&i| mask[i]).map(|i| frame.y()[i]).collect();
        prop_assert_eq!(kept.n_rows(), expected.len());
        prop_assert_eq!(kept.y(), &expected[..]);
    }

    #[test]
    fn frame_construction_preserves_row_alignment_under_permutation(
        (k, n, x1, y, margins) in frame_parts(4, 8),
        salt in any::<u64>(),
    ) {
        let w: Vec<f64> = (0..n).map(|i| ((i / k) % 2) as f64).collect();
        let ids: Vec<i64> = (0..n as i64).map(|i| 1000 + i).collect();
        // Deterministic pseudo-shuffle: sort row indices by a salted hash.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ salt);

        let base = build_frame(x1.clone(), y.clone(), w.clone(), k, &margins);
        let permuted = AnalysisFrame::from_parts(
            vec![ColumnSpec::continuous("x1")],
            vec![perm.iter().map(|&i| base.feature(0)[i]).collect()],
            perm.iter().map(|&i| y[i]).collect(),
            perm.iter().map(|&i| w[i]).collect(),
            &perm.iter().map(|&i| format!("m{}", i % k)).collect::<Vec<_>>(),
            perm.iter().map(|&i| margins[i % k]).collect(),
            Some(perm.iter().map(|&i| ids[i]).collect()),
        ).unwrap();

        for (pos, &i) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.y()[pos].to_bits(), base.y()[i].to_bits());
            prop_assert_eq!(permuted.w()[pos].to_bits(), base.w()[i].to_bits());
            prop_assert_eq!(permuted.margin()[pos].to_bits(), base.margin()[i].to_bits());
            prop_assert_eq!(permuted.xij(pos, 0).to_bits(), base.xij(i, 0).to_bits());
            prop_assert_eq!(
                &permuted.cluster_labels()[permuted.cluster()[pos]],
                &base.cluster_labels()[base.cluster()[i]]
            );
            prop_assert_eq!(permuted.worker_ids().unwrap()[pos], ids[i]);
        }
    }

    #[test]
    fn oracle_and_workspace_least_squares_agree(
        n in 12usize..60,
        d in 1usize..=3,
        cells in prop::collection::vec(-1.0f64..1.0, 240),
        betas in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        // Deterministic skeletons with distinct periods keep the design full
        // rank even when shrinking drives the random perturbations to zero.
        let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];
        for j in 0..d {
            let period = [5usize, 7, 9][j];
            let col: Vec<f64> = (0..n)
                .map(|i| ((i * (j + 2)) % period) as f64 + cells[(j * n + i) % cells.len()])
                .collect();
            columns.push(col);
        }
        let y: Vec<f64> = (0..n)
            .map(|i| {
                columns
                    .iter()
                    .enumerate()
                    .map(|(j, col)| betas[j] * col[i])
                    .sum::<f64>()
                    + cells[(3 * n + i) % cells.len()]
            })
            .collect();
        let names: Vec<&str> = ["intercept", "c1", "c2", "c3"][..=d].to_vec();
        let oracle = oracle_ols(&columns, &y).unwrap();
        let solved = ols_solve(&columns, &names, &y).unwrap();
        for j in 0..=d {
            prop_assert!(
                (oracle[j] - solved[j]).abs() <= 1e-7 * (1.0 + oracle[j].abs()),
                "coefficient {j}: oracle {} vs solver {}", oracle[j], solved[j]
            );
        }
    }
}

proptest! {
    // Each case grows a forest, so keep the case count modest.
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forest_weights_form_a_distribution_over_co_leaf_rows(
        per in 8usize..=10,
        x_noise in prop::collection::vec(-50.0f64..50.0, 60),
        point_pick in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let k = 6usize;
        let n = k * per;
        let x1: Vec<f64> = (0..n).map(|i| x_noise[i % x_noise.len()]).collect();
        let y: Vec<f64> = (0..n).map(|i| (i % 13) as f64 - 6.0).collect();
        let w: Vec<f64> = (0..n).map(|i| ((i / k) % 2) as f64).collect();
        let margins: Vec<f64> = (0..k).map(|c| c as f64 - 2.5).collect();
        let frame = build_frame(x1, y.clone(), w.clone(), k, &margins);
        let y_bar = stats::mean(&y);
        let y_tilde: Vec<f64> = y.iter().map(|v| v - y_bar).collect();
        let w_tilde: Vec<f64> = w.iter().map(|v| v - 0.5).collect();

        let params = ForestParams {
            num_trees: 24,
            min_leaf: 2,
            subsample_rate: 0.5,
            mtry: None,
            max_depth: Some(2),
            honesty_fraction: 0.5,
            boost_stages: 0,
        };
        let forest = fit_causal_forest(&frame, &y_tilde, &w_tilde, &params, seed).unwrap();

        let i = point_pick.index(n);
        let x_point = [frame.xij(i, 0)];
        let weights = forest.weights(&x_point).unwrap();

        let total: f64 = weights.iter().map(|(_, a)| a).sum();
        prop_assert!((total - 1.0).abs() <= 1e-8, "weights sum to {total}");
        for &(row, alpha) in &weights {
            prop_assert!(alpha > 0.0);
            let shares_a_leaf = forest.trees.iter().any(|tree| {
                let leaf = route(tree.nodes(), |j| x_point[j]);
                tree.leaf_rows()[leaf as usize].contains(&row)
            });
            prop_assert!(
                shares_a_leaf,
                "row {row} got weight {alpha} without sharing any leaf with the point"
            );
        }
    }
}
