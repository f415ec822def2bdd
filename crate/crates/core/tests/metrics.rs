use manatee_core::traineval::{compare_runs, format_comparison, pr_curve, Metrics, RunSummary};
use proptest::prelude::*;

/// Recomputes the confusion at `t` from scratch.
fn metrics_at(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let tp = scores.iter().zip(labels).filter(|(s, y)| **s >= t && **y).count() as f64;
    let fp = scores.iter().zip(labels).filter(|(s, y)| **s >= t && !**y).count() as f64;
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    (tp / (tp + fp), tp / pos)
}

fn scored_set() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..30).prop_map(|k| k as f64 / 30.0), n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
            .prop_map(|(s, mut y, forced)| {
                y[forced] = true;
                (s, y)
            })
    })
}

proptest! {
    #[test]
    fn curve_matches_per_threshold_recount((scores, labels) in scored_set()) {
        let curve = pr_curve(&scores, &labels).unwrap();
        for p in &curve.points {
            let (precision, recall) = metrics_at(&scores, &labels, p.threshold);
            prop_assert_eq!(p.precision, precision);
            prop_assert_eq!(p.recall, recall);
        }
    }

    #[test]
    fn recall_never_rises_with_threshold((scores, labels) in scored_set()) {
        let curve = pr_curve(&scores, &labels).unwrap();
        // points are in descending threshold order
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold > w[1].threshold);
            prop_assert!(w[0].recall <= w[1].recall);
        }
        prop_assert_eq!(curve.points.last().unwrap().recall, 1.0);
        prop_assert!((0.0..=1.0).contains(&curve.average_precision));
    }

    #[test]
    fn trailing_low_negative_leaves_ap_unchanged((scores, labels) in scored_set()) {
        let before = pr_curve(&scores, &labels).unwrap().average_precision;
        let lowest = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut s = scores.clone();
        let mut y = labels.clone();
        s.push(lowest - 1.0);
        y.push(false);
        prop_assert_eq!(pr_curve(&s, &y).unwrap().average_precision, before);
    }

    #[test]
    fn f1_symmetric_in_fp_fn_when_precision_equals_recall(tp in 1usize..500, e in 0usize..500, tn in 0usize..500) {
        let a = Metrics::from_counts(tp, e, e, tn, 0.5);
        prop_assert_eq!(a.precision, a.recall);
        let b = Metrics::from_counts(tp, e, e, tn + 1, 0.5);
        prop_assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn thresholded_metrics_agree_with_curve((scores, labels) in scored_set(), k in 0usize..30) {
        let t = k as f64 / 30.0;
        let m = Metrics::from_scores(&scores, &labels, t);
        let (precision, recall) = metrics_at(&scores, &labels, t);
        if m.tp + m.fp > 0 {
            prop_assert_eq!(m.precision, precision);
        }
        prop_assert_eq!(m.recall, recall);
    }
}

#[test]
fn ap_depends_only_on_score_order() {
    let scores = [0.9, 0.8, 0.7, 0.4, 0.2];
    let labels = [true, false, true, true, false];
    let squashed: Vec<f64> = scores.iter().map(|s| s * s).collect();
    assert_eq!(
        pr_curve(&scores, &labels).unwrap().average_precision,
        pr_curve(&squashed, &labels).unwrap().average_precision
    );
}

#[test]
fn two_run_f1_mean_and_population_std() {
    // P = R = F1 for symmetric confusions
    let runs = [Metrics::from_counts(9, 1, 1, 0, 0.5), Metrics::from_counts(47, 3, 3, 0, 0.5)];
    assert!((runs[0].f1 - 0.90).abs() < 1e-12 && (runs[1].f1 - 0.94).abs() < 1e-12);
    let s = RunSummary::of(&runs).unwrap();
    assert!((s.f1.mean - 0.92).abs() < 1e-12);
    assert!((s.f1.std - 0.02).abs() < 1e-12);
    let same = RunSummary::of(&[runs[0], runs[0]]).unwrap();
    assert_eq!(same.f1.std, 0.0);
}

#[test]
fn comparison_table_matches_fixture() {
    let original = [Metrics::from_counts(9, 1, 1, 0, 0.5), Metrics::from_counts(4, 1, 1, 0, 0.5)];
    let feedback = [Metrics::from_counts(19, 1, 1, 0, 0.5), Metrics::from_counts(17, 1, 1, 0, 0.5)];
    let cmp = compare_runs(("Original", &original), ("Human feedback", &feedback)).unwrap();
    let expected = include_str!("fixtures/run_comparison.txt");
    assert_eq!(format_comparison(&cmp), expected);
}

#[test]
fn comparison_needs_two_runs_per_arm() {
    let one = [Metrics::from_counts(1, 0, 0, 0, 0.5)];
    let two = [one[0], one[0]];
    assert!(compare_runs(("a", &one), ("b", &two)).is_err());
    assert!(compare_runs(("a", &two), ("b", &one)).is_err());
}
