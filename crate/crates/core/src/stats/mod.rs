//! Evaluation statistics: stratified fold assignment, classification
//! metrics, ROC/AUC, the exact McNemar test, logistic regression with Wald
//! tests, and severity breakdowns.
//!
//! Class-coded values throughout are `usize` indices in `0..3`
//! (0 = COVID-19, 1 = CAP, 2 = normal); the data module owns the label enum.

mod logit;

pub use logit::{logistic_fit, normal_cdf, LogisticFit};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub const N_CLASSES: usize = 3;

/// Assignment of item indices to `k` folds, stratified by class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    /// `folds[f]` lists the item indices assigned to fold `f`, in
    /// assignment order.
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn fold_sizes(&self) -> Vec<usize> {
        self.folds.iter().map(Vec::len).collect()
    }

    /// Count of members of `class` in fold `f` given the original labels.
    pub fn class_count(&self, f: usize, class: usize, classes: &[usize]) -> usize {
        self.folds[f].iter().filter(|i| classes[**i] == class).count()
    }
}

/// Stratified k-fold assignment. Items of each class are shuffled with a
/// class-specific stream of `seed`, then dealt round-robin; the dealing
/// cursor carries over between classes so total fold sizes stay within one
/// of each other as well.
pub fn stratified_kfold(classes: &[usize], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 1 {
        return Err(Error::config(format!("fold count must be >= 1, got {}", k)));
    }
    if classes.is_empty() {
        return Err(Error::data("no items to assign to folds"));
    }
    let max_class = *classes.iter().max().expect("non-empty");
    let stream = SeedStream::new(seed);
    let mut folds = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for class in 0..=max_class {
        let mut members: Vec<usize> = (0..classes.len())
            .filter(|i| classes[*i] == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut rng = stream.rng(&format!("stratified_kfold/class{}", class));
        members.shuffle(&mut rng);
        for idx in members {
            folds[cursor % k].push(idx);
            cursor += 1;
        }
    }
    Ok(FoldSplit { k, folds })
}

/// One point of a ROC curve; `threshold` may be infinite at the endpoints.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Threshold-sweep ROC curve and trapezoidal AUC. A point is emitted for
/// `+inf`, every distinct score (descending), and `-inf`; an item counts as
/// predicted-positive when `score >= threshold`. Requires at least one
/// positive and one negative item.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != positives.len() {
        return Err(Error::dim(
            "roc_auc",
            format!("{} scores vs {} labels", scores.len(), positives.len()),
        ));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::contract("roc_auc scores must be finite"));
    }
    let pos_total = positives.iter().filter(|p| **p).count();
    let neg_total = positives.len() - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return Err(Error::data(
            "roc_auc requires at least one positive and one negative item",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).expect("finite scores"));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let t = scores[order[i]];
        // Consume the whole tie group before emitting a point.
        while i < order.len() && scores[order[i]] == t {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg_total as f64,
            tpr: tp as f64 / pos_total as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });

    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0;
    }
    Ok((points, auc))
}

/// Exact two-sided McNemar test on discordant counts:
/// `p = min(1, 2 * sum_{k<=min(b,c)} C(n,k) / 2^n)` with `n = b + c`;
/// `b = c = 0` yields `p = 1`.
pub fn mcnemar_exact(b: i64, c: i64) -> Result<f64> {
    if b < 0 || c < 0 {
        return Err(Error::contract(format!(
            "discordant counts must be non-negative, got b={}, c={}",
            b, c
        )));
    }
    let n = (b + c) as u64;
    if n == 0 {
        return Ok(1.0);
    }
    let m = b.min(c) as u64;
    // Terms C(n,k)/2^n ascend for k <= m <= n/2; accumulate relative to the
    // largest term (k = m) so the partial sum never underflows prematurely.
    let mut ln_tm = -(n as f64) * std::f64::consts::LN_2;
    for j in 1..=m {
        ln_tm += ((n - j + 1) as f64).ln() - (j as f64).ln();
    }
    let mut acc = 1.0;
    let mut rel = 1.0;
    let mut k = m;
    while k > 0 {
        rel *= k as f64 / (n - k + 1) as f64;
        acc += rel;
        k -= 1;
    }
    Ok((2.0 * ln_tm.exp() * acc).min(1.0))
}

/// Classification metrics for three-class decisions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// `confusion[truth][decision]`.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub accuracy: f64,
    /// Per-class recall; `None` when the class has no true members.
    pub sensitivity: [Option<f64>; N_CLASSES],
    /// ROC curve for an associated binary score, when one was attached.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc: Option<Vec<RocPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Confusion matrix, accuracy, and per-class sensitivities. Inputs must be
/// equal-length, non-empty, with every label in `0..3`.
pub fn compute_metrics(decisions: &[usize], truths: &[usize]) -> Result<MetricsReport> {
    if decisions.len() != truths.len() {
        return Err(Error::dim(
            "compute_metrics",
            format!("{} decisions vs {} truths", decisions.len(), truths.len()),
        ));
    }
    if decisions.is_empty() {
        return Err(Error::data("compute_metrics requires at least one item"));
    }
    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    for (d, t) in decisions.iter().zip(truths) {
        if *d >= N_CLASSES || *t >= N_CLASSES {
            return Err(Error::contract(format!(
                "class index out of range: decision {}, truth {}",
                d, t
            )));
        }
        confusion[*t][*d] += 1;
    }
    let correct: u64 = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / decisions.len() as f64;
    let mut sensitivity = [None; N_CLASSES];
    for c in 0..N_CLASSES {
        let total: u64 = confusion[c].iter().sum();
        if total > 0 {
            sensitivity[c] = Some(confusion[c][c] as f64 / total as f64);
        }
    }
    Ok(MetricsReport {
        n: decisions.len(),
        confusion,
        accuracy,
        sensitivity,
        roc: None,
        auc: None,
    })
}

/// Correct/total decision counts per severity grade among covid-truth cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeverityRow {
    /// Grade 1-4, or `None` for cases without imaging findings.
    pub severity: Option<u8>,
    pub correct: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeverityBreakdown {
    /// Rows for grades 1, 2, 3, 4 and then the no-findings row; rows with
    /// zero totals are retained.
    pub rows: Vec<SeverityRow>,
}

/// Break correct-decision counts down by severity grade over covid-truth
/// items (`truth == 0`). `severities[i]` applies to item `i`; grades must
/// lie in 1..=4 when present.
pub fn severity_breakdown(
    decisions: &[usize],
    truths: &[usize],
    severities: &[Option<u8>],
) -> Result<SeverityBreakdown> {
    if decisions.len() != truths.len() || decisions.len() != severities.len() {
        return Err(Error::dim(
            "severity_breakdown",
            format!(
                "lengths differ: {} decisions, {} truths, {} severities",
                decisions.len(),
                truths.len(),
                severities.len()
            ),
        ));
    }
    if let Some(s) = severities.iter().flatten().find(|s| !(1..=4).contains(*s)) {
        return Err(Error::data(format!("severity grade {} outside 1..=4", s)));
    }
    if let Some(v) = decisions.iter().chain(truths).find(|v| **v >= N_CLASSES) {
        return Err(Error::data(format!(
            "class index {} outside 0..{}",
            v, N_CLASSES
        )));
    }
    let mut rows: Vec<SeverityRow> = (1..=4)
        .map(|g| SeverityRow {
            severity: Some(g),
            correct: 0,
            total: 0,
        })
        .collect();
    rows.push(SeverityRow {
        severity: None,
        correct: 0,
        total: 0,
    });
    for i in 0..decisions.len() {
        if truths[i] != 0 {
            continue;
        }
        let row = match severities[i] {
            Some(g) => &mut rows[g as usize - 1],
            None => rows.last_mut().expect("no-findings row exists"),
        };
        row.total += 1;
        if decisions[i] == truths[i] {
            row.correct += 1;
        }
    }
    Ok(SeverityBreakdown { rows })
}

/// Mean and population (biased) standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}
