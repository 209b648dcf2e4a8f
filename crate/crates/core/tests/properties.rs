//! Property tests: index exactness with ties and the increment rule against
//! the naive reference on small random bags.

mod common;

use common::*;
use dpdkit::baselines::no_dpd_trial;
use dpdkit::dpd::{classify_trial, Bag, DpdHyperParams, Polarity};
use dpdkit::features::InstanceVector;
use dpdkit::neighbors::{build_index, sq_dist, IndexKind, Points};
use proptest::prelude::*;

/// Coordinates on a coarse grid so duplicate rows and equal distances occur.
fn lattice_points(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec((-3i32..=3).prop_map(|v| v as f64 * 0.5), dim), 1..120)
}

fn bag(pol: Polarity, rows: &[Vec<f64>], kind: IndexKind) -> Bag {
    let dim = rows[0].len();
    Bag::from_points(pol, Points::from_rows(dim, rows).unwrap(), Default::default(), kind).unwrap()
}

fn instances(rows: &[Vec<f64>]) -> Vec<InstanceVector> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| InstanceVector {
            trial_id: "q".into(),
            window_index: i,
            start_sample: i * 10,
            features: r.clone(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ball_tree_matches_brute_force(
        dim in 1usize..12,
        seed_rows in lattice_points(12),
        queries in prop::collection::vec(prop::collection::vec((-3i32..=3).prop_map(|v| v as f64 * 0.5), 12), 1..10),
        k in 1usize..40,
    ) {
        let rows: Vec<Vec<f64>> = seed_rows.iter().map(|r| r[..dim].to_vec()).collect();
        let pts = Points::from_rows(dim, &rows).unwrap();
        let brute = build_index(pts.clone(), IndexKind::BruteForce).unwrap();
        let tree = build_index(pts.clone(), IndexKind::BallTree).unwrap();
        for q in &queries {
            let q = &q[..dim];
            let a = brute.search(q, k).unwrap();
            let b = tree.search(q, k).unwrap();
            prop_assert_eq!(&a, &b);
            let mut all: Vec<(usize, f64)> = pts.rows().enumerate().map(|(i, r)| (i, sq_dist(q, r))).collect();
            all.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
            all.truncate(k);
            prop_assert_eq!(a.indices, all.iter().map(|x| x.0).collect::<Vec<_>>());
        }
    }

    #[test]
    fn increments_match_naive_reference(
        pos in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 1..60),
        neg in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 1..60),
        queries in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 1..20),
        k in 1usize..12,
        gamma in 0.01f64..20.0,
        pi in 0.0f64..1.0,
        lambda in -1.0f64..1.0,
    ) {
        let params = DpdHyperParams { k, pi, lambda, gamma, min_evidence: None };
        let pr: Vec<&[f64]> = pos.iter().map(|r| r.as_slice()).collect();
        let nr: Vec<&[f64]> = neg.iter().map(|r| r.as_slice()).collect();
        let naive: Vec<f64> = queries.iter().map(|q| naive_delta(q, &pr, &nr, k, gamma)).collect();
        prop_assume!(naive.iter().all(|d| (d.abs() - pi).abs() > 1e-9));
        let want = naive_trial(naive, pi, lambda);
        prop_assume!(want.no_evidence || (want.score - lambda).abs() > 1e-9);
        for kind in [IndexKind::BruteForce, IndexKind::BallTree] {
            let got = classify_trial(
                &instances(&queries),
                &bag(Polarity::Positive, &pos, kind),
                &bag(Polarity::Negative, &neg, kind),
                &params,
            ).unwrap();
            for (w, d) in got.windows.iter().zip(&want.deltas) {
                prop_assert!((w.delta - d).abs() <= 1e-9 * d.abs().max(1.0));
            }
            prop_assert_eq!(got.windows.iter().map(|w| w.class).collect::<Vec<_>>(), want.classes.clone());
            prop_assert_eq!(got.no_evidence, want.no_evidence);
            prop_assert_eq!(got.prediction, want.prediction);
            prop_assert!((got.score - want.score).abs() <= 1e-9 * want.score.abs().max(1.0));
        }
    }

    #[test]
    fn no_dpd_is_pi_zero(
        pos in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..40),
        neg in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..40),
        queries in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..15),
        k in 1usize..8,
        pi in 0.0f64..2.0,
        lambda in -1.0f64..1.0,
    ) {
        let bp = bag(Polarity::Positive, &pos, IndexKind::BallTree);
        let bn = bag(Polarity::Negative, &neg, IndexKind::BallTree);
        let q = instances(&queries);
        let params = DpdHyperParams { k, pi, lambda, ..DpdHyperParams::default() };
        let a = no_dpd_trial(&q, &bp, &bn, &params).unwrap();
        let b = classify_trial(&q, &bp, &bn, &DpdHyperParams { pi: 0.0, ..params }).unwrap();
        prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
        prop_assert_eq!(a, b);
    }
}
