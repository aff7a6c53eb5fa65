use hyperlat::anomaly::{
    knn_score, reconstruction_scores, replica_angle, roc_metrics, score_dataset, ScoredSample,
};
use hyperlat::matrix::DenseMatrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_map(move |v| DenseMatrix::from_fn(rows, cols, |i, j| v[i * cols + j]))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Sorts every distance and averages the first `k`.
fn knn_oracle(q: &[f64], reference: &DenseMatrix, k: usize) -> f64 {
    let mut d: Vec<f64> = reference.row_iter().map(|r| distance(q, r)).collect();
    d.sort_by(f64::total_cmp);
    d[..k].iter().sum::<f64>() / k as f64
}

fn samples(normal: &[f64], anomalous: &[f64]) -> Vec<ScoredSample> {
    normal
        .iter()
        .map(|&s| (s, false))
        .chain(anomalous.iter().map(|&s| (s, true)))
        .enumerate()
        .map(|(id, (score, anomalous))| ScoredSample { id, score, anomalous })
        .collect()
}

/// Probability that a random anomalous score beats a random normal one.
fn pairwise_auroc(normal: &[f64], anomalous: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in anomalous {
        for n in normal {
            wins += if a > n {
                1.0
            } else if a == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (normal.len() * anomalous.len()) as f64
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0f64..5.0, (0u8..6).prop_map(f64::from)], 2..30)
}

#[test]
fn equidistant_reference_scores_its_distance() {
    let reference = DenseMatrix::from_rows(&[vec![5.0, 0.0], vec![0.0, 5.0], vec![-3.0, 4.0], vec![4.0, -3.0]]).unwrap();
    for k in 1..=4 {
        assert_eq!(knn_score(&[0.0, 0.0], &reference, k).unwrap(), 5.0);
    }
}

#[test]
fn scoring_the_training_set_against_itself_is_zero_at_k_one() {
    let train = DenseMatrix::from_fn(15, 3, |i, j| (i * 7 + j * 3) as f64 / 11.0);
    let scored = score_dataset(&train, &train, &[false; 15], 1).unwrap();
    assert!(scored.iter().all(|s| s.score == 0.0));
}

#[test]
fn knn_rejects_bad_shapes() {
    let r = DenseMatrix::from_fn(2, 3, |i, j| (i + j) as f64);
    assert!(knn_score(&[0.0; 3], &r, 0).is_err());
    assert!(knn_score(&[0.0; 3], &r, 3).is_err());
    assert!(knn_score(&[0.0; 2], &r, 1).is_err());
}

#[test]
fn replica_angles_match_a_direct_loop() {
    let test = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![1.0, 1.0, 1.0], vec![-1.0, 0.0, 3.0]]).unwrap();
    let normal = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
    let centre = [0.5, 1.0, 0.0];
    let want: Vec<f64> = test
        .row_iter()
        .map(|r| {
            let dot: f64 = r.iter().zip(&centre).map(|(a, b)| a * b).sum();
            (dot / (distance(r, &[0.0; 3]) * distance(&centre, &[0.0; 3]))).acos()
        })
        .collect();
    let got = replica_angle(&test, &normal).unwrap();
    for (g, w) in got.angles.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
    let mean = want.iter().sum::<f64>() / 4.0;
    assert!((got.mean - mean).abs() < 1e-12);
    assert!(replica_angle(&test, &DenseMatrix::zeros(1, 3)).is_err());
}

#[test]
fn reconstruction_scores_are_row_norms() {
    let x = DenseMatrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 1.0]]).unwrap();
    let x_hat = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
    assert_eq!(reconstruction_scores(&x, &x_hat).unwrap(), vec![5.0, 0.0]);
    assert!(reconstruction_scores(&x, &DenseMatrix::zeros(1, 2)).is_err());
}

#[test]
fn fpr95_uses_the_interpolated_percentile() {
    // Sorted normals 0..=19: the 95th percentile sits at 18.05.
    let normal: Vec<f64> = (0..20).map(f64::from).collect();
    let anomalous = [18.0, 18.05, 18.1, 30.0];
    let r = roc_metrics(&samples(&normal, &anomalous)).unwrap();
    assert!((r.threshold95 - 18.05).abs() < 1e-12);
    assert_eq!(r.fpr95, 0.5);
}

proptest! {
    #[test]
    fn knn_matches_full_sort(reference in matrix(12, 3), q in prop::collection::vec(-10.0f64..10.0, 3), k in 1usize..=12) {
        let got = knn_score(&q, &reference, k).unwrap();
        prop_assert!((got - knn_oracle(&q, &reference, k)).abs() <= 1e-12 * (1.0 + got));
    }

    #[test]
    fn knn_ignores_reference_order(reference in matrix(10, 2), q in prop::collection::vec(-10.0f64..10.0, 2), k in 1usize..=10, rot in 0usize..10) {
        let order: Vec<usize> = (0..10).map(|i| (i + rot) % 10).rev().collect();
        let a = knn_score(&q, &reference, k).unwrap();
        let b = knn_score(&q, &reference.select_rows(&order), k).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn knn_is_one_lipschitz_in_the_query(reference in matrix(8, 3), q in prop::collection::vec(-10.0f64..10.0, 3), dq in prop::collection::vec(-1.0f64..1.0, 3), k in 1usize..=8) {
        let moved: Vec<f64> = q.iter().zip(&dq).map(|(a, b)| a + b).collect();
        let gap = (knn_score(&q, &reference, k).unwrap() - knn_score(&moved, &reference, k).unwrap()).abs();
        prop_assert!(gap <= distance(&q, &moved) + 1e-9);
    }

    #[test]
    fn dataset_scores_follow_rows(train in matrix(30, 4), test in matrix(20, 4), flags in prop::collection::vec(any::<bool>(), 20)) {
        let scored = score_dataset(&train, &test, &flags, 3).unwrap();
        for (i, s) in scored.iter().enumerate() {
            prop_assert_eq!(s.id, i);
            prop_assert_eq!(s.anomalous, flags[i]);
            prop_assert!((s.score - knn_oracle(test.row(i), &train, 3)).abs() <= 1e-12 * (1.0 + s.score));
        }
        let order: Vec<usize> = (0..20).rev().collect();
        let reversed = score_dataset(&train, &test.select_rows(&order), &flags.iter().rev().copied().collect::<Vec<_>>(), 3).unwrap();
        for (i, s) in reversed.iter().enumerate() {
            prop_assert_eq!(s.score, scored[19 - i].score);
        }
    }

    #[test]
    fn auroc_is_the_pairwise_win_rate(normal in scores(), anomalous in scores()) {
        let r = roc_metrics(&samples(&normal, &anomalous)).unwrap();
        prop_assert!((r.auroc - pairwise_auroc(&normal, &anomalous)).abs() < 1e-12);
        prop_assert!((r.auroc - r.auroc_trapezoid).abs() < 1e-12);
        prop_assert_eq!(r.roc.first().copied().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        prop_assert_eq!(r.roc.last().copied().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        for w in r.roc.windows(2) {
            prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
    }

    #[test]
    fn auroc_ignores_monotone_transforms(normal in scores(), anomalous in scores(), a in 0.1f64..10.0, b in 0.0f64..5.0) {
        let base = roc_metrics(&samples(&normal, &anomalous)).unwrap().auroc;
        let f = |v: &[f64]| v.iter().map(|s| a * s + b).collect::<Vec<_>>();
        let g = |v: &[f64]| v.iter().map(|s| s.exp()).collect::<Vec<_>>();
        prop_assert_eq!(roc_metrics(&samples(&f(&normal), &f(&anomalous))).unwrap().auroc, base);
        prop_assert_eq!(roc_metrics(&samples(&g(&normal), &g(&anomalous))).unwrap().auroc, base);
    }

    #[test]
    fn raising_anomalous_scores_never_raises_fpr95(normal in scores(), anomalous in scores()) {
        let mut last = roc_metrics(&samples(&normal, &anomalous)).unwrap().fpr95;
        for shift in [0.1, 1.0, 10.0] {
            let moved: Vec<f64> = anomalous.iter().map(|s| s + shift).collect();
            let now = roc_metrics(&samples(&normal, &moved)).unwrap().fpr95;
            prop_assert!(now <= last);
            last = now;
        }
    }
}
