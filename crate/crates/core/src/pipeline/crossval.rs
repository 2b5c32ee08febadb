//! Stratified k-fold cross-validation over the full pipeline.
//!
//! Each fold trains stage 1, stage 2, and the fusion MLP on the training
//! patients only (clinical standardization included), then evaluates on the
//! held-out patients. With a fixed seed the whole run is deterministic:
//! repeated runs produce byte-identical reports and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{encode_clinical, preprocess_slice, ClinicalScaling, PatientRecord};
use crate::error::{Error, Result};
use crate::pipeline::net::BnMode;
use crate::pipeline::train::chw_input;
use crate::pipeline::{
    infer_fusion, infer_stage2, select_candidates, stage1_forward, train_fusion_mlp, train_stage1,
    train_stage2, BundleConfig, CandidateSet, FusionInput, ModelBundle, ParamSet, SliceSample,
    Stage1Config, Stage2Config, TrainSpec,
};
use crate::pipeline::train::Stage2Sample;
use crate::rng::SeedStream;
use crate::stats::{
    compute_metrics, mcnemar_exact, mean_sd, severity_breakdown, stratified_kfold, MetricsReport,
    SeverityBreakdown, SeverityRow,
};
use crate::tensor::{Graph, Tensor};

/// Slice-level decision threshold on the infection probability.
pub const P_INF_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub k: usize,
    pub seed: u64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub train_stage1: TrainSpec,
    pub train_stage2: TrainSpec,
    pub train_fusion: TrainSpec,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig {
            k: 10,
            seed: 0,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            train_stage1: TrainSpec::stage1_default(),
            train_stage2: TrainSpec::stage2_default(),
            train_fusion: TrainSpec::fusion_default(),
        }
    }
}

impl CrossvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!(
                "cross-validation needs k >= 2, got {}",
                self.k
            )));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.input_side != self.stage2.input_side {
            return Err(Error::config(format!(
                "stage input sides differ ({} vs {}); both stages consume the same \
                 preprocessed slices",
                self.stage1.input_side, self.stage2.input_side
            )));
        }
        self.train_stage1.validate()?;
        self.train_stage2.validate()?;
        self.train_fusion.validate()
    }
}

/// Mean with population standard deviation across folds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd_of(values: &[f64]) -> MeanSd {
    let (mean, sd) = mean_sd(values);
    MeanSd { mean, sd }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_patients: Vec<String>,
    /// Accuracy at the 0.5 threshold over held-out slices that carry
    /// infection labels.
    pub stage1_slice_accuracy: f64,
    pub stage1_slice_sensitivity: Option<f64>,
    pub stage1_slice_specificity: Option<f64>,
    pub stage2: MetricsReport,
    pub fusion: MetricsReport,
    /// Discordant counts: stage-2 wrong while fusion right (`b`), fusion
    /// wrong while stage-2 right (`c`).
    pub mcnemar_b: u64,
    pub mcnemar_c: u64,
    /// Exact two-sided McNemar p-value, rounded to 4 decimals.
    pub mcnemar_p: f64,
    /// Fusion decisions on true covid patients, split by severity grade.
    pub severity: SeverityBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub stage1_slice_accuracy: MeanSd,
    pub stage2_accuracy: MeanSd,
    pub fusion_accuracy: MeanSd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_auc: Option<MeanSd>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_auc: Option<MeanSd>,
    /// Fusion per-class sensitivity over folds where the class appears.
    pub fusion_sensitivity: [Option<MeanSd>; 3],
    pub pooled_confusion_stage2: [[u64; 3]; 3],
    pub pooled_confusion_fusion: [[u64; 3]; 3],
    /// Discordant counts pooled over all held-out patients.
    pub mcnemar_b: u64,
    pub mcnemar_c: u64,
    pub mcnemar_p: f64,
    pub severity: SeverityBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
}

fn round4(p: f64) -> f64 {
    (p * 1e4).round() / 1e4
}

/// Infection probabilities for all slices of one patient, sharing one graph
/// so the parameters are entered once.
fn stage1_p_infs(params: &ParamSet, cfg: &Stage1Config, slices: &[Tensor]) -> Result<Vec<f64>> {
    let mut graph = Graph::new();
    let vars = params.enter(&mut graph)?;
    let mut out = Vec::with_capacity(slices.len());
    for slice in slices {
        let input = chw_input(&mut graph, slice)?;
        let fwd = stage1_forward(&mut graph, &vars, params, cfg, input, &mut BnMode::Infer)?;
        let norms = graph.value(fwd.norms);
        let (a, b) = (norms[0], norms[1]);
        out.push(if a + b > 0.0 { a / (a + b) } else { 0.5 });
    }
    Ok(out)
}

fn attach_roc(report: &mut MetricsReport, scores: &[f64], truths: &[usize]) -> Result<()> {
    let positives: Vec<bool> = truths.iter().map(|t| *t == 0).collect();
    let n_pos = positives.iter().filter(|p| **p).count();
    if n_pos == 0 || n_pos == positives.len() {
        return Ok(());
    }
    let (points, auc) = crate::stats::roc_auc(scores, &positives)?;
    report.roc = Some(points);
    report.auc = Some(auc);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract(format!("cannot serialize report: {}", e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_roc_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut text = String::from("threshold,fpr,tpr\n");
    if let Some(points) = &report.roc {
        for p in points {
            text.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pooled_severity(folds: &[FoldReport]) -> SeverityBreakdown {
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
    for fold in folds {
        for (acc, row) in rows.iter_mut().zip(&fold.severity.rows) {
            acc.correct += row.correct;
            acc.total += row.total;
        }
    }
    SeverityBreakdown { rows }
}

/// Run stratified k-fold cross-validation; when `out_dir` is given, write
/// per-fold artifacts (`fold_<f>/report.json`, `roc_stage2.csv`,
/// `roc_fusion.csv`, `checkpoint.cvcp`) and the top-level `aggregate.json`.
pub fn run_crossval(
    records: &[PatientRecord],
    cfg: &CrossvalConfig,
    out_dir: Option<&Path>,
) -> Result<CrossvalReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::data("cross-validation needs at least one patient"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let side = cfg.stage1.input_side;
    let mut pre: Vec<Vec<Tensor>> = Vec::with_capacity(records.len());
    for r in records {
        let mut slices = Vec::with_capacity(r.slices.len());
        for (slice, mask) in r.slices.iter().zip(&r.masks) {
            slices.push(preprocess_slice(slice, mask, side)?);
        }
        pre.push(slices);
    }

    let classes: Vec<usize> = records.iter().map(|r| r.label.index()).collect();
    let split = stratified_kfold(&classes, cfg.k, cfg.seed)?;
    let seeds = SeedStream::new(cfg.seed);

    let mut folds = Vec::with_capacity(cfg.k);
    for f in 0..cfg.k {
        let mut test: Vec<usize> = split.folds[f].clone();
        test.sort_unstable();
        if test.is_empty() {
            return Err(Error::data(format!(
                "fold {} has no test patients ({} patients over {} folds)",
                f,
                records.len(),
                cfg.k
            )));
        }
        let in_test: Vec<bool> = {
            let mut mask = vec![false; records.len()];
            for &i in &test {
                mask[i] = true;
            }
            mask
        };
        let train: Vec<usize> = (0..records.len()).filter(|i| !in_test[*i]).collect();
        if train.is_empty() {
            return Err(Error::data(format!("fold {} has no training patients", f)));
        }

        let seed_for = |stage: &str| -> u64 {
            let mut rng = seeds.rng(&format!("fold{}/{}_seed", f, stage));
            rng.next_u64()
        };

        // Stage 1 on training slices.
        let mut slice_samples = Vec::new();
        for &i in &train {
            let flags = records[i].slice_infection_labels.as_ref().ok_or_else(|| {
                Error::data(format!(
                    "patient {} lacks slice infection labels required for training",
                    records[i].id
                ))
            })?;
            for (j, slice) in pre[i].iter().enumerate() {
                slice_samples.push(SliceSample {
                    patient: i,
                    pixels: slice.clone(),
                    infected: flags[j],
                });
            }
        }
        let spec1 = TrainSpec {
            seed: seed_for("stage1"),
            ..cfg.train_stage1.clone()
        };
        let model1 = train_stage1(&slice_samples, &cfg.stage1, &spec1)?;

        // Infection probabilities for every patient in the fold universe.
        let mut p_infs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &i in train.iter().chain(&test) {
            p_infs.insert(i, stage1_p_infs(&model1.params, &cfg.stage1, &pre[i])?);
        }

        // Slice-level evaluation on held-out patients with labels.
        let (mut tp, mut tn, mut fp, mut fneg) = (0u64, 0u64, 0u64, 0u64);
        for &i in &test {
            if let Some(flags) = &records[i].slice_infection_labels {
                for (p, infected) in p_infs[&i].iter().zip(flags) {
                    let predicted = *p >= P_INF_THRESHOLD;
                    match (predicted, *infected) {
                        (true, true) => tp += 1,
                        (false, false) => tn += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                    }
                }
            }
        }
        let labeled = tp + tn + fp + fneg;
        if labeled == 0 {
            return Err(Error::data(format!(
                "fold {} has no labeled held-out slices to evaluate stage 1",
                f
            )));
        }
        let stage1_acc = (tp + tn) as f64 / labeled as f64;
        let stage1_sens = if tp + fneg > 0 {
            Some(tp as f64 / (tp + fneg) as f64)
        } else {
            None
        };
        let stage1_spec = if tn + fp > 0 {
            Some(tn as f64 / (tn + fp) as f64)
        } else {
            None
        };

        // Candidate sets for everyone, stage-2 training on the train split.
        let mut candidates: BTreeMap<usize, CandidateSet> = BTreeMap::new();
        for &i in train.iter().chain(&test) {
            candidates.insert(
                i,
                select_candidates(
                    &records[i].id,
                    &pre[i],
                    &p_infs[&i],
                    cfg.stage2.candidate_count,
                )?,
            );
        }
        let stage2_samples: Vec<Stage2Sample> = train
            .iter()
            .map(|i| Stage2Sample {
                candidates: candidates[i].clone(),
                label: records[*i].label,
            })
            .collect();
        let spec2 = TrainSpec {
            seed: seed_for("stage2"),
            ..cfg.train_stage2.clone()
        };
        let model2 = train_stage2(&stage2_samples, &cfg.stage2, &spec2)?;

        // Stage-2 inference for fusion inputs (train) and evaluation (test).
        let mut stage2_probs: BTreeMap<usize, [f64; 3]> = BTreeMap::new();
        let mut stage2_decisions: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in train.iter().chain(&test) {
            let inf = infer_stage2(&model2.params, &cfg.stage2, &candidates[&i])?;
            stage2_probs.insert(i, inf.gated.probs);
            stage2_decisions.insert(i, inf.gated.decision);
        }

        let clinicals: Vec<&crate::data::ClinicalFeatures> =
            train.iter().map(|i| &records[*i].clinical).collect();
        let scaling = ClinicalScaling::fit(&clinicals)?;
        let fusion_rows: Vec<(FusionInput, crate::data::ClassLabel)> = train
            .iter()
            .map(|i| {
                Ok((
                    FusionInput::new(
                        stage2_probs[i],
                        encode_clinical(&records[*i].clinical, &scaling),
                    )?,
                    records[*i].label,
                ))
            })
            .collect::<Result<_>>()?;
        let spec_fusion = TrainSpec {
            seed: seed_for("fusion"),
            ..cfg.train_fusion.clone()
        };
        let fusion = train_fusion_mlp(&fusion_rows, &spec_fusion)?;

        // Held-out evaluation.
        let truths: Vec<usize> = test.iter().map(|i| records[*i].label.index()).collect();
        let s2_dec: Vec<usize> = test.iter().map(|i| stage2_decisions[i]).collect();
        let s2_cov: Vec<f64> = test.iter().map(|i| stage2_probs[i][0]).collect();
        let mut fu_dec = Vec::with_capacity(test.len());
        let mut fu_cov = Vec::with_capacity(test.len());
        for &i in &test {
            let input = FusionInput::new(
                stage2_probs[&i],
                encode_clinical(&records[i].clinical, &scaling),
            )?;
            let out = infer_fusion(&fusion.params, &input)?;
            fu_dec.push(out.decision);
            fu_cov.push(out.probs[0]);
        }

        let mut stage2_report = compute_metrics(&s2_dec, &truths)?;
        attach_roc(&mut stage2_report, &s2_cov, &truths)?;
        let mut fusion_report = compute_metrics(&fu_dec, &truths)?;
        attach_roc(&mut fusion_report, &fu_cov, &truths)?;

        let mut b = 0u64;
        let mut c = 0u64;
        for idx in 0..test.len() {
            let s2_ok = s2_dec[idx] == truths[idx];
            let fu_ok = fu_dec[idx] == truths[idx];
            if !s2_ok && fu_ok {
                b += 1;
            }
            if s2_ok && !fu_ok {
                c += 1;
            }
        }
        let p = mcnemar_exact(b as i64, c as i64)?;

        let severities: Vec<Option<u8>> = test.iter().map(|i| records[*i].severity).collect();
        let severity = severity_breakdown(&fu_dec, &truths, &severities)?;

        let report = FoldReport {
            fold: f,
            test_patients: test.iter().map(|i| records[*i].id.clone()).collect(),
            stage1_slice_accuracy: stage1_acc,
            stage1_slice_sensitivity: stage1_sens,
            stage1_slice_specificity: stage1_spec,
            stage2: stage2_report,
            fusion: fusion_report,
            mcnemar_b: b,
            mcnemar_c: c,
            mcnemar_p: round4(p),
            severity,
        };

        if let Some(dir) = out_dir {
            let fold_dir = dir.join(format!("fold_{}", f));
            fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
            let bundle = ModelBundle {
                stage1: Some(model1.params.clone()),
                stage2: Some(model2.params.clone()),
                fusion: Some(fusion.params.clone()),
                config: BundleConfig {
                    stage1: Some(cfg.stage1.clone()),
                    stage2: Some(cfg.stage2.clone()),
                    scaling: Some(scaling.clone()),
                },
            };
            bundle.save(&fold_dir.join("checkpoint.cvcp"))?;
            write_json(&fold_dir.join("report.json"), &report)?;
            write_roc_csv(&fold_dir.join("roc_stage2.csv"), &report.stage2)?;
            write_roc_csv(&fold_dir.join("roc_fusion.csv"), &report.fusion)?;
        }
        folds.push(report);
    }

    let collect = |take: &dyn Fn(&FoldReport) -> f64| -> Vec<f64> {
        folds.iter().map(take).collect()
    };
    let stage1_acc = mean_sd_of(&collect(&|r| r.stage1_slice_accuracy));
    let stage2_acc = mean_sd_of(&collect(&|r| r.stage2.accuracy));
    let fusion_acc = mean_sd_of(&collect(&|r| r.fusion.accuracy));
    let auc_of = |take: &dyn Fn(&FoldReport) -> Option<f64>| -> Option<MeanSd> {
        let values: Vec<f64> = folds.iter().filter_map(take).collect();
        if values.is_empty() {
            None
        } else {
            Some(mean_sd_of(&values))
        }
    };
    let stage2_auc = auc_of(&|r| r.stage2.auc);
    let fusion_auc = auc_of(&|r| r.fusion.auc);
    let mut fusion_sensitivity = [None, None, None];
    for class in 0..3 {
        let values: Vec<f64> = folds
            .iter()
            .filter_map(|r| r.fusion.sensitivity[class])
            .collect();
        if !values.is_empty() {
            fusion_sensitivity[class] = Some(mean_sd_of(&values));
        }
    }
    let mut pooled_s2 = [[0u64; 3]; 3];
    let mut pooled_fu = [[0u64; 3]; 3];
    let mut total_b = 0u64;
    let mut total_c = 0u64;
    for r in &folds {
        for t in 0..3 {
            for d in 0..3 {
                pooled_s2[t][d] += r.stage2.confusion[t][d];
                pooled_fu[t][d] += r.fusion.confusion[t][d];
            }
        }
        total_b += r.mcnemar_b;
        total_c += r.mcnemar_c;
    }
    let aggregate = Aggregate {
        stage1_slice_accuracy: stage1_acc,
        stage2_accuracy: stage2_acc,
        fusion_accuracy: fusion_acc,
        stage2_auc,
        fusion_auc,
        fusion_sensitivity,
        pooled_confusion_stage2: pooled_s2,
        pooled_confusion_fusion: pooled_fu,
        mcnemar_b: total_b,
        mcnemar_c: total_c,
        mcnemar_p: round4(mcnemar_exact(total_b as i64, total_c as i64)?),
        severity: pooled_severity(&folds),
    };
    let report = CrossvalReport {
        k: cfg.k,
        seed: cfg.seed,
        folds,
        aggregate,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("aggregate.json"), &report)?;
    }
    Ok(report)
}
