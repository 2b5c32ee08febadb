// Evaluation statistics: fold assignment, ROC/AUC, McNemar, metrics, and
// logistic regression, each checked against independent references.

use ctcaps::stats::{
    compute_metrics, logistic_fit, mcnemar_exact, mean_sd, normal_cdf, roc_auc,
    severity_breakdown, stratified_kfold,
};
use ctcaps::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn class_counts(sizes: (usize, usize, usize)) -> Vec<usize> {
    let mut classes = vec![0; sizes.0];
    classes.extend(vec![1; sizes.1]);
    classes.extend(vec![2; sizes.2]);
    classes
}

#[test]
fn kfold_partitions_every_item_exactly_once() {
    let classes = class_counts((104, 60, 56));
    let split = stratified_kfold(&classes, 10, 3).unwrap();
    let mut seen = vec![0u32; classes.len()];
    for fold in &split.folds {
        for &i in fold {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|c| *c == 1));
}

#[test]
fn kfold_balances_the_published_cohort_shape() {
    // 104/60/56 into 10 folds: every fold holds 22 items with 10-11 of the
    // first class, 6 of the second, and 5-6 of the third.
    let classes = class_counts((104, 60, 56));
    let split = stratified_kfold(&classes, 10, 17).unwrap();
    assert_eq!(split.k, 10);
    for f in 0..10 {
        assert_eq!(split.folds[f].len(), 22);
        let c0 = split.class_count(f, 0, &classes);
        let c1 = split.class_count(f, 1, &classes);
        let c2 = split.class_count(f, 2, &classes);
        assert!(c0 == 10 || c0 == 11, "fold {} class0 {}", f, c0);
        assert_eq!(c1, 6, "fold {} class1 {}", f, c1);
        assert!(c2 == 5 || c2 == 6, "fold {} class2 {}", f, c2);
    }
}

#[test]
fn kfold_spreads_scarce_classes_without_doubling_up() {
    // 7 items of one class over 10 folds: seven folds get one, three get none.
    let classes = vec![0usize; 7];
    let split = stratified_kfold(&classes, 10, 0).unwrap();
    let ones = (0..10).filter(|f| split.folds[*f].len() == 1).count();
    let zeros = (0..10).filter(|f| split.folds[*f].is_empty()).count();
    assert_eq!((ones, zeros), (7, 3));
}

#[test]
fn kfold_is_deterministic_per_seed() {
    let classes = class_counts((30, 30, 30));
    let a = stratified_kfold(&classes, 10, 11).unwrap();
    let b = stratified_kfold(&classes, 10, 11).unwrap();
    assert_eq!(a.folds, b.folds);
    let c = stratified_kfold(&classes, 10, 12).unwrap();
    assert_ne!(a.folds, c.folds);
}

#[test]
fn kfold_rejects_degenerate_requests() {
    assert!(stratified_kfold(&[0, 1, 2], 0, 0).is_err());
    assert!(stratified_kfold(&[], 3, 0).is_err());
}

proptest! {
    #[test]
    fn kfold_class_counts_differ_by_at_most_one(
        n0 in 1usize..60,
        n1 in 0usize..60,
        n2 in 0usize..60,
        k in 2usize..11,
        seed in 0u64..500,
    ) {
        let classes = class_counts((n0, n1, n2));
        let split = stratified_kfold(&classes, k, seed).unwrap();
        prop_assert_eq!(split.folds.len(), k);
        for class in 0..3 {
            let counts: Vec<usize> = (0..k).map(|f| split.class_count(f, class, &classes)).collect();
            let lo = counts.iter().min().unwrap();
            let hi = counts.iter().max().unwrap();
            prop_assert!(hi - lo <= 1, "class {} counts {:?}", class, counts);
        }
        let total_lo = split.fold_sizes().into_iter().min().unwrap();
        let total_hi = split.fold_sizes().into_iter().max().unwrap();
        prop_assert!(total_hi - total_lo <= 1);
    }
}

/// O(n^2) pair-count AUC: concordant pairs plus half of score ties.
fn auc_by_pairs(scores: &[f64], positives: &[bool]) -> f64 {
    let mut concordant = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positives.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positives.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                concordant += 1.0;
            } else if scores[i] == scores[j] {
                concordant += 0.5;
            }
        }
    }
    concordant / pairs
}

#[test]
fn roc_handles_perfect_and_inverted_rankings() {
    let scores = [0.9, 0.8, 0.2, 0.1];
    let labels = [true, true, false, false];
    let (points, auc) = roc_auc(&scores, &labels).unwrap();
    assert_eq!(auc, 1.0);
    assert_eq!(points.first().unwrap().threshold, f64::INFINITY);
    assert_eq!(points.last().unwrap().threshold, f64::NEG_INFINITY);
    assert_eq!((points.last().unwrap().fpr, points.last().unwrap().tpr), (1.0, 1.0));

    let inverted = [false, false, true, true];
    let (_, auc) = roc_auc(&scores, &inverted).unwrap();
    assert_eq!(auc, 0.0);

    // All scores equal: the curve is the diagonal.
    let (_, auc) = roc_auc(&[0.5; 4], &labels).unwrap();
    assert!((auc - 0.5).abs() < 1e-12);
}

#[test]
fn roc_curve_is_monotone_and_matches_pair_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..50 {
        let n = rng.gen_range(2..120);
        // Coarse quantization forces plenty of ties.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..10)) / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        if let Some(l) = labels.iter_mut().skip(1).find(|l| **l) {
            // Ensure at least one negative exists alongside the positives.
            *l = false;
        } else {
            labels[1 % n] = false;
        }
        if labels.iter().filter(|l| !**l).count() == 0 {
            continue;
        }
        let (points, auc) = roc_auc(&scores, &labels).unwrap();
        let want = auc_by_pairs(&scores, &labels);
        assert!((auc - want).abs() < 1e-9, "auc {} vs pairs {}", auc, want);
        for w in points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }
}

#[test]
fn roc_rejects_single_class_and_non_finite_scores() {
    assert!(matches!(
        roc_auc(&[0.1, 0.2], &[true, true]),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        roc_auc(&[f64::NAN, 0.2], &[true, false]),
        Err(Error::Contract(_))
    ));
    assert!(roc_auc(&[0.1], &[true, false]).is_err());
}

#[test]
fn mcnemar_published_arithmetic() {
    // Exact two-sided binomial values, checkable by hand from 2^-n tables.
    assert!((mcnemar_exact(3, 0).unwrap() - 0.25).abs() < 1e-12);
    assert!((mcnemar_exact(2, 0).unwrap() - 0.5).abs() < 1e-12);
    assert!((mcnemar_exact(3, 1).unwrap() - 0.625).abs() < 1e-12);
    assert!((mcnemar_exact(4, 1).unwrap() - 0.375).abs() < 1e-12);
    assert!((mcnemar_exact(5, 5).unwrap() - 1.0).abs() < 1e-12);
    assert!((mcnemar_exact(0, 0).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn mcnemar_is_symmetric_and_validates_counts() {
    for (b, c) in [(7, 2), (1, 9), (12, 12)] {
        let p1 = mcnemar_exact(b, c).unwrap();
        let p2 = mcnemar_exact(c, b).unwrap();
        assert!((p1 - p2).abs() < 1e-15);
        assert!(p1 > 0.0 && p1 <= 1.0);
    }
    assert!(mcnemar_exact(-1, 3).is_err());
}

proptest! {
    #[test]
    fn mcnemar_matches_direct_binomial_sum(b in 0i64..40, c in 0i64..40) {
        let p = mcnemar_exact(b, c).unwrap();
        // Reference: two-sided exact binomial tail doubling with p = 1/2.
        let n = (b + c) as u32;
        if n == 0 {
            prop_assert!((p - 1.0).abs() < 1e-15);
        } else {
            let k = b.min(c) as u32;
            let mut tail = 0.0;
            for i in 0..=k {
                // C(n, i) / 2^n computed in logs for stability.
                let mut log_c = 0.0f64;
                for j in 0..i {
                    log_c += ((n - j) as f64).ln() - ((j + 1) as f64).ln();
                }
                tail += (log_c - (n as f64) * std::f64::consts::LN_2).exp();
            }
            let want = (2.0 * tail).min(1.0);
            prop_assert!((p - want).abs() < 1e-9, "b {} c {}: {} vs {}", b, c, p, want);
        }
    }
}

#[test]
fn mean_sd_uses_population_variance() {
    let (m, s) = mean_sd(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(m, 5.0);
    assert_eq!(s, 2.0);
    let (m, s) = mean_sd(&[3.0]);
    assert_eq!((m, s), (3.0, 0.0));
}

#[test]
fn metrics_report_matches_hand_confusion() {
    let truths = [0, 0, 0, 1, 1, 2, 2, 2, 2];
    let decisions = [0, 0, 1, 1, 1, 2, 2, 0, 2];
    let report = compute_metrics(&decisions, &truths).unwrap();
    assert_eq!(report.n, 9);
    assert_eq!(report.confusion[0], [2, 1, 0]);
    assert_eq!(report.confusion[1], [0, 2, 0]);
    assert_eq!(report.confusion[2], [1, 0, 3]);
    assert!((report.accuracy - 7.0 / 9.0).abs() < 1e-12);
    assert!((report.sensitivity[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((report.sensitivity[1].unwrap() - 1.0).abs() < 1e-12);
    assert!((report.sensitivity[2].unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn metrics_report_absent_class_has_no_sensitivity() {
    let report = compute_metrics(&[0, 1, 0], &[0, 1, 1]).unwrap();
    assert!(report.sensitivity[2].is_none());
    assert!(report.roc.is_none());
    assert!(report.auc.is_none());
    assert!(compute_metrics(&[0, 3], &[0, 1]).is_err());
    assert!(compute_metrics(&[0], &[0, 1]).is_err());
    assert!(compute_metrics(&[], &[]).is_err());
}

#[test]
fn metrics_report_serializes_round_trip() {
    let report = compute_metrics(&[0, 1, 2, 0], &[0, 1, 2, 2]).unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let back: ctcaps::stats::MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.n, report.n);
    assert_eq!(back.confusion, report.confusion);
    assert!(!json.contains("\"roc\""), "absent roc must not serialize");
}

#[test]
fn severity_breakdown_groups_covid_truths_by_grade() {
    // Items: covid grade 1 (right), covid grade 1 (wrong), covid grade 3
    // (right), covid no-findings (right), cap (ignored), normal (ignored).
    let truths = [0, 0, 0, 0, 1, 2];
    let decisions = [0, 1, 0, 0, 1, 2];
    let severities = [Some(1), Some(1), Some(3), None, None, None];
    let b = severity_breakdown(&decisions, &truths, &severities).unwrap();
    assert_eq!(b.rows.len(), 5);
    assert_eq!(b.rows[0].severity, Some(1));
    assert_eq!((b.rows[0].correct, b.rows[0].total), (1, 2));
    assert_eq!((b.rows[1].correct, b.rows[1].total), (0, 0));
    assert_eq!((b.rows[2].correct, b.rows[2].total), (1, 1));
    assert_eq!((b.rows[3].correct, b.rows[3].total), (0, 0));
    assert_eq!(b.rows[4].severity, None);
    assert_eq!((b.rows[4].correct, b.rows[4].total), (1, 1));
}

#[test]
fn severity_breakdown_validates_inputs() {
    assert!(severity_breakdown(&[0], &[0, 1], &[None, None]).is_err());
    assert!(severity_breakdown(&[0], &[0], &[Some(5)]).is_err());
    assert!(severity_breakdown(&[0], &[3], &[None]).is_err());
}

#[test]
fn logistic_fit_recovers_grouped_data_mle_exactly() {
    // One binary feature with 10 observations per level: 3/10 positive at
    // x=0, 7/10 at x=1. The MLE has the closed form b0 = logit(0.3),
    // b0 + b1 = logit(0.7).
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..10 {
        rows.push(vec![0.0]);
        y.push(i < 3);
        rows.push(vec![1.0]);
        y.push(i < 7);
    }
    let fit = logistic_fit(&rows, &y).unwrap();
    assert!(fit.converged && !fit.separation);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    assert!((fit.coefficients[0] - logit(0.3)).abs() < 1e-8);
    assert!((fit.coefficients[1] - (logit(0.7) - logit(0.3))).abs() < 1e-8);

    // Standard error of the slope from the closed-form information matrix:
    // I = [[4.2, 2.1], [2.1, 2.1]] so var(b1) = 4.2 / (4.2*2.1 - 2.1^2).
    let want_se = (4.2f64 / (4.2 * 2.1 - 2.1 * 2.1)).sqrt();
    let se = &fit.standard_errors.unwrap();
    assert!((se[1] - want_se).abs() < 1e-6, "se {} want {}", se[1], want_se);

    // Wald pieces are mutually consistent.
    let z = fit.z_values.unwrap();
    let p = fit.p_values.unwrap();
    assert!((z[1] - fit.coefficients[1] / se[1]).abs() < 1e-10);
    assert!((p[1] - 2.0 * (1.0 - normal_cdf(z[1].abs()))).abs() < 1e-12);
}

#[test]
fn logistic_fit_recovers_slope_direction_on_synthetic_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b0, b1) = (-0.5, 1.2);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for _ in 0..800 {
        let x: f64 = rng.gen_range(-2.0..2.0);
        let p = 1.0 / (1.0 + (-(b0 + b1 * x)).exp());
        rows.push(vec![x]);
        y.push(rng.gen_bool(p));
    }
    let fit = logistic_fit(&rows, &y).unwrap();
    assert!(fit.converged);
    assert!((fit.coefficients[0] - b0).abs() < 0.3);
    assert!((fit.coefficients[1] - b1).abs() < 0.3);
    // An effect this large at n=800 is decisively detected.
    assert!(fit.p_values.unwrap()[1] < 1e-6);
}

#[test]
fn separable_data_sets_the_flag_instead_of_p_values() {
    let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![f64::from(i)]).collect();
    let y: Vec<bool> = (0..20).map(|i| i >= 10).collect();
    let fit = logistic_fit(&rows, &y).unwrap();
    assert!(fit.separation);
    assert!(!fit.converged);
    assert!(fit.p_values.is_none());
    assert!(fit.standard_errors.is_none());
    assert!(fit.z_values.is_none());
}

#[test]
fn logistic_fit_rejects_degenerate_designs() {
    let rows = vec![vec![1.0], vec![1.0], vec![1.0], vec![1.0]];
    let y = vec![true, false, true, false];
    assert!(matches!(logistic_fit(&rows, &y), Err(Error::Data(_))));

    let rows = vec![vec![1.0], vec![2.0], vec![3.0]];
    assert!(logistic_fit(&rows, &[true, true, true]).is_err());
    assert!(logistic_fit(&rows, &[true, false]).is_err());
    assert!(logistic_fit(&[], &[]).is_err());

    // Collinear pair of columns.
    let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![f64::from(i), 2.0 * f64::from(i)]).collect();
    let y: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
    assert!(matches!(logistic_fit(&rows, &y), Err(Error::Data(_))));
}

#[test]
fn null_slope_p_values_are_roughly_uniform() {
    // Independent feature and outcome: the slope p-value should exceed 0.05
    // in about 95% of trials. A small-sample smoke version of the full
    // hundred-seed calibration in the acceptance suite.
    let mut high = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let rows: Vec<Vec<f64>> = (0..500).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let y: Vec<bool> = (0..500).map(|_| rng.gen_bool(0.4)).collect();
        let fit = logistic_fit(&rows, &y).unwrap();
        if fit.p_values.map(|p| p[1] > 0.05).unwrap_or(false) {
            high += 1;
        }
    }
    assert!(high >= 16, "only {}/20 null fits had p > 0.05", high);
}

#[test]
fn normal_cdf_reference_points() {
    // The erfc approximation carries |error| < 1.2e-7.
    assert!((normal_cdf(0.0) - 0.5).abs() < 1e-6);
    assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
    assert!((normal_cdf(-1.959964) - 0.025).abs() < 1e-6);
    assert!((normal_cdf(1.0) - 0.841344746).abs() < 1e-6);
    assert!(normal_cdf(8.0) > 0.999999);
}
