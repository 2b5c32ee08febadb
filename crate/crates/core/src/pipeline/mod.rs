//! The two-stage model plus the clinical-fusion head: configuration types,
//! parameter store, candidate selection, gating, training, inference,
//! checkpoints, and the cross-validation harness.

mod checkpoint;
mod crossval;
mod infer;
mod net;
mod train;

pub use checkpoint::Checkpoint;
pub use crossval::{
    run_crossval, Aggregate, CrossvalConfig, CrossvalReport, FoldReport, MeanSd, P_INF_THRESHOLD,
};
pub use infer::{
    gradcam_score_stage1, gradcam_score_stage2, infer_fusion, infer_stage1, infer_stage2,
    FusionInference, Stage1Inference, Stage2Inference,
};
pub use net::{
    fusion_forward, fusion_params, stage1_forward, stage1_params, stage2_forward, stage2_params,
    BnMode, StageVars, BN_EPS, FUSION_HIDDEN, FUSION_LAYERS,
};
pub use train::{
    train_fusion_mlp, train_stage1, train_stage2, Adam, SliceSample, Stage2Sample, TrainHistory,
    TrainedModel, BN_MOMENTUM,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::capsule::MarginLossConfig;
use crate::data::ClinicalScaling;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// (capsule count, capsule dimension) of one capsule layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsSpec {
    pub count: usize,
    pub dim: usize,
}

/// Stage-1 slice-level infectious/non-infectious network.
///
/// Four 3x3 stride-1 convolutions with relu, one max pool (after conv 2),
/// one batch normalization (after conv 4), two shortcut connections, and
/// three capsule layers: `capsules[0]` describes the primary capsules formed
/// from the final feature map; `capsules[1..]` are routed layers, the last
/// holding the two class capsules.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub input_side: usize,
    pub conv_channels: [usize; 4],
    pub pool_window: usize,
    pub capsules: [CapsSpec; 3],
    /// Two `(from_layer, to_layer)` pairs, 1-based conv indices: the output
    /// of `from` is concatenated into the input of `to` (pooled when the
    /// source sits before the pool and the target after it).
    pub shortcuts: [(usize, usize); 2],
    pub routing_iterations: usize,
    pub loss: MarginLossConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            input_side: 64,
            conv_channels: [4, 8, 8, 8],
            pool_window: 4,
            capsules: [
                CapsSpec { count: 256, dim: 8 },
                CapsSpec { count: 16, dim: 8 },
                CapsSpec { count: 2, dim: 8 },
            ],
            shortcuts: [(1, 3), (2, 4)],
            routing_iterations: 3,
            loss: MarginLossConfig::default(),
        }
    }
}

impl Stage1Config {
    /// Spatial side of the feature maps after the pool layer.
    pub fn pooled_side(&self) -> usize {
        self.input_side / self.pool_window
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 {
            return Err(Error::config("stage-1 input_side must be positive"));
        }
        if self.conv_channels.iter().any(|c| *c == 0) {
            return Err(Error::config("stage-1 conv channels must be positive"));
        }
        if self.pool_window < 2 || self.input_side % self.pool_window != 0 {
            return Err(Error::config(format!(
                "pool window {} must be >= 2 and divide input side {}",
                self.pool_window, self.input_side
            )));
        }
        for (from, to) in self.shortcuts {
            if !(1..=4).contains(&from) || !(1..=4).contains(&to) || from >= to {
                return Err(Error::config(format!(
                    "shortcut ({}, {}) must reference conv layers with from < to",
                    from, to
                )));
            }
        }
        let primary = self.capsules[0];
        if primary.dim == 0 || self.conv_channels[3] % primary.dim != 0 {
            return Err(Error::config(format!(
                "primary capsule dim {} must divide final conv channels {}",
                primary.dim, self.conv_channels[3]
            )));
        }
        let side = self.pooled_side();
        let expect = (self.conv_channels[3] / primary.dim) * side * side;
        if primary.count != expect {
            return Err(Error::config(format!(
                "primary capsule count {} does not match feature-map geometry ({} expected)",
                primary.count, expect
            )));
        }
        for caps in &self.capsules[1..] {
            if caps.count == 0 || caps.dim == 0 {
                return Err(Error::config("capsule layer sizes must be positive"));
            }
        }
        if self.capsules[2].count != 2 {
            return Err(Error::config(format!(
                "stage-1 final capsule count must be 2 (infectious / non-infectious), got {}",
                self.capsules[2].count
            )));
        }
        if self.routing_iterations < 1 {
            return Err(Error::config("routing iterations must be >= 1"));
        }
        self.loss.validate()
    }
}

/// Stage-2 time-distributed patient-level network: three convolutions, one
/// max pool (after conv 1), one batch normalization (after conv 3), primary
/// capsules by reshape, and two routed capsule layers ending in the three
/// class capsules.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Number of candidate slices per patient (K).
    pub candidate_count: usize,
    pub input_side: usize,
    pub conv_channels: [usize; 3],
    pub pool_window: usize,
    pub primary_caps_dim: usize,
    pub capsules: [CapsSpec; 2],
    pub routing_iterations: usize,
    pub loss: MarginLossConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            candidate_count: 10,
            input_side: 64,
            conv_channels: [4, 8, 8],
            pool_window: 4,
            primary_caps_dim: 8,
            capsules: [
                CapsSpec { count: 16, dim: 8 },
                CapsSpec { count: 3, dim: 8 },
            ],
            routing_iterations: 3,
            loss: MarginLossConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn pooled_side(&self) -> usize {
        self.input_side / self.pool_window
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidate_count == 0 {
            return Err(Error::config("candidate count must be >= 1"));
        }
        if self.input_side == 0 {
            return Err(Error::config("stage-2 input_side must be positive"));
        }
        if self.conv_channels.iter().any(|c| *c == 0) {
            return Err(Error::config("stage-2 conv channels must be positive"));
        }
        if self.pool_window < 2 || self.input_side % self.pool_window != 0 {
            return Err(Error::config(format!(
                "pool window {} must be >= 2 and divide input side {}",
                self.pool_window, self.input_side
            )));
        }
        if self.primary_caps_dim == 0 || self.conv_channels[2] % self.primary_caps_dim != 0 {
            return Err(Error::config(format!(
                "primary capsule dim {} must divide final conv channels {}",
                self.primary_caps_dim, self.conv_channels[2]
            )));
        }
        for caps in &self.capsules {
            if caps.count == 0 || caps.dim == 0 {
                return Err(Error::config("capsule layer sizes must be positive"));
            }
        }
        if self.capsules[1].count != 3 {
            return Err(Error::config(format!(
                "stage-2 final capsule count must be 3 (covid / cap / normal), got {}",
                self.capsules[1].count
            )));
        }
        if self.routing_iterations < 1 {
            return Err(Error::config("routing iterations must be >= 1"));
        }
        self.loss.validate()
    }

    /// Primary capsule count implied by the geometry.
    pub fn primary_count(&self) -> usize {
        let side = self.pooled_side();
        (self.conv_channels[2] / self.primary_caps_dim) * side * side
    }
}

/// Optimizer and schedule settings for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec::stage1_default()
    }
}

impl TrainSpec {
    /// Stage-1 regime: Adam 1e-4, batch 16, 100 epochs.
    pub fn stage1_default() -> Self {
        TrainSpec {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            validation_fraction: 0.30,
        }
    }

    /// Stage-2 regime: Adam 1e-4, batch 8, 150 epochs.
    pub fn stage2_default() -> Self {
        TrainSpec {
            batch_size: 8,
            epochs: 150,
            ..TrainSpec::stage1_default()
        }
    }

    /// Fusion regime: Adam 1e-4, batch 16, 500 epochs.
    pub fn fusion_default() -> Self {
        TrainSpec {
            batch_size: 16,
            epochs: 500,
            ..TrainSpec::stage1_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epoch count must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors in deterministic (sorted) order. Trainable
/// entries carry `requires_grad`; auxiliary state (running statistics) does
/// not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter '{}'", name)));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{}'", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Enter every parameter into a graph; the returned map shares the
    /// parameter names.
    pub fn enter(&self, graph: &mut Graph) -> Result<BTreeMap<String, Var>> {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.entries {
            vars.insert(name.clone(), graph.leaf(tensor)?);
        }
        Ok(vars)
    }

    /// Names of trainable entries, sorted.
    pub fn trainable(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Flatten into `(prefix.name, tensor)` pairs for checkpointing.
    pub fn to_entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, t)| (format!("{}.{}", prefix, n), t.clone()))
            .collect()
    }

    /// Rebuild from checkpoint entries with `prefix.` stripped. Loaded
    /// parameters are inference-only (`requires_grad` off).
    pub fn from_entries(entries: &[(String, Tensor)], prefix: &str) -> Result<Self> {
        let mut set = ParamSet::new();
        let want = format!("{}.", prefix);
        for (name, tensor) in entries {
            if let Some(stripped) = name.strip_prefix(&want) {
                let mut t = tensor.clone();
                t.set_requires_grad(false);
                set.insert(stripped, t)?;
            }
        }
        if set.is_empty() {
            return Err(Error::contract(format!(
                "checkpoint holds no '{}' parameters",
                prefix
            )));
        }
        Ok(set)
    }
}

/// The K candidate slices of one patient, ordered by descending infection
/// probability (ties by ascending slice index; short lists padded by
/// repeating the top candidate).
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub patient: String,
    /// Original slice index of each candidate (repeats possible via padding).
    pub slice_indices: Vec<usize>,
    pub slices: Vec<Tensor>,
    pub p_inf: Vec<f64>,
}

impl CandidateSet {
    pub fn k(&self) -> usize {
        self.slices.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices.is_empty()
            || self.slices.len() != self.p_inf.len()
            || self.slices.len() != self.slice_indices.len()
        {
            return Err(Error::contract(format!(
                "candidate set for {} has inconsistent lengths",
                self.patient
            )));
        }
        if self.p_inf.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::contract(format!(
                "candidate probabilities for {} are not sorted non-increasing",
                self.patient
            )));
        }
        if self.p_inf.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract(format!(
                "candidate probability outside [0,1] for {}",
                self.patient
            )));
        }
        Ok(())
    }
}

/// Pick the top-K slices of one patient by infection probability.
/// Ties break toward the lower slice index; fewer than K slices pad by
/// repeating the top-ranked one.
pub fn select_candidates(
    patient: &str,
    slices: &[Tensor],
    p_infs: &[f64],
    k: usize,
) -> Result<CandidateSet> {
    if slices.is_empty() {
        return Err(Error::data(format!(
            "patient {} has no slices to select from",
            patient
        )));
    }
    if slices.len() != p_infs.len() {
        return Err(Error::dim(
            "select_candidates",
            format!("{} slices vs {} probabilities", slices.len(), p_infs.len()),
        ));
    }
    if k == 0 {
        return Err(Error::config("candidate count must be >= 1"));
    }
    if p_infs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::contract(
            "infection probabilities must be finite and lie in [0, 1]",
        ));
    }
    let mut order: Vec<usize> = (0..slices.len()).collect();
    order.sort_by(|a, b| {
        p_infs[*b]
            .partial_cmp(&p_infs[*a])
            .expect("finite probabilities")
            .then(a.cmp(b))
    });
    order.truncate(k);
    if order.len() < k {
        while order.len() < k {
            order.push(order[0]);
        }
        // Padding repeats the top slice; restore the non-increasing order
        // that CandidateSet::validate checks.
        order.sort_by(|a, b| {
            p_infs[*b]
                .partial_cmp(&p_infs[*a])
                .expect("finite probabilities")
                .then(a.cmp(b))
        });
    }
    Ok(CandidateSet {
        patient: patient.to_string(),
        slice_indices: order.clone(),
        slices: order.iter().map(|i| slices[*i].clone()).collect(),
        p_inf: order.iter().map(|i| p_infs[*i]).collect(),
    })
}

/// Gated, pooled class scores for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedDecision {
    /// Max-pooled gated scores per class (pre-normalization).
    pub scores: [f64; 3],
    /// Scores normalized to sum 1 (uniform when all scores are 0).
    pub probs: [f64; 3],
    /// Argmax of the scores; exact ties resolve toward the higher class
    /// index, so an all-zero patient lands on normal.
    pub decision: usize,
}

/// Gate per-candidate class norms by infection probability and max-pool:
/// candidate k scores `(p_k * covid, p_k * cap, (1 - p_k) * normal)`.
pub fn gate_and_pool(norms: &[[f64; 3]], p_inf: &[f64]) -> Result<GatedDecision> {
    if norms.is_empty() || norms.len() != p_inf.len() {
        return Err(Error::dim(
            "gate_and_pool",
            format!("{} norm rows vs {} probabilities", norms.len(), p_inf.len()),
        ));
    }
    for (k, p) in p_inf.iter().enumerate() {
        if !(0.0..=1.0).contains(p) {
            return Err(Error::contract(format!(
                "p_inf[{}] = {} outside [0, 1]",
                k, p
            )));
        }
    }
    for (k, row) in norms.iter().enumerate() {
        if row.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::contract(format!(
                "candidate {} norms outside [0, 1)",
                k
            )));
        }
    }
    let mut scores = [0.0f64; 3];
    for (row, p) in norms.iter().zip(p_inf) {
        let gated = [row[0] * p, row[1] * p, row[2] * (1.0 - p)];
        for c in 0..3 {
            scores[c] = scores[c].max(gated[c]);
        }
    }
    let total: f64 = scores.iter().sum();
    let probs = if total > 0.0 {
        [scores[0] / total, scores[1] / total, scores[2] / total]
    } else {
        [1.0 / 3.0; 3]
    };
    let mut decision = 0;
    for c in 1..3 {
        if scores[c] >= scores[decision] {
            decision = c;
        }
    }
    Ok(GatedDecision {
        scores,
        probs,
        decision,
    })
}

/// Configuration snapshot stored in a checkpoint's JSON blob.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1: Option<Stage1Config>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2: Option<Stage2Config>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ClinicalScaling>,
}

/// Trained parameter sets of any subset of the pipeline, bundled for one
/// checkpoint file. Entry names carry a `stage1.` / `stage2.` / `fusion.`
/// prefix.
#[derive(Debug, Clone, Default)]
pub struct ModelBundle {
    pub stage1: Option<ParamSet>,
    pub stage2: Option<ParamSet>,
    pub fusion: Option<ParamSet>,
    pub config: BundleConfig,
}

impl ModelBundle {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut entries = Vec::new();
        if let Some(p) = &self.stage1 {
            entries.extend(p.to_entries("stage1"));
        }
        if let Some(p) = &self.stage2 {
            entries.extend(p.to_entries("stage2"));
        }
        if let Some(p) = &self.fusion {
            entries.extend(p.to_entries("fusion"));
        }
        if entries.is_empty() {
            return Err(Error::contract("model bundle holds no parameters"));
        }
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| Error::contract(format!("cannot serialize bundle config: {}", e)))?;
        Checkpoint::new(entries, config_json)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let entries = ckpt.entries();
        let has = |prefix: &str| {
            let want = format!("{}.", prefix);
            entries.iter().any(|(n, _)| n.starts_with(&want))
        };
        let pick = |prefix: &str| -> Result<Option<ParamSet>> {
            if has(prefix) {
                Ok(Some(ParamSet::from_entries(entries, prefix)?))
            } else {
                Ok(None)
            }
        };
        Ok(ModelBundle {
            stage1: pick("stage1")?,
            stage2: pick("stage2")?,
            fusion: pick("fusion")?,
            config: ckpt.config()?,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        ModelBundle::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Eleven fusion-MLP inputs: three class probabilities plus eight encoded
/// clinical features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionInput {
    pub class_probs: [f64; 3],
    pub clinical: [f64; 8],
}

impl FusionInput {
    pub fn new(class_probs: [f64; 3], clinical: [f64; 8]) -> Result<Self> {
        let sum: f64 = class_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || class_probs.iter().any(|p| *p < 0.0) {
            return Err(Error::data(format!(
                "class probabilities must be non-negative and sum to 1, got {:?}",
                class_probs
            )));
        }
        if clinical.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("clinical features must be finite"));
        }
        Ok(FusionInput {
            class_probs,
            clinical,
        })
    }

    pub fn to_row(&self) -> [f64; 11] {
        let mut row = [0.0; 11];
        row[..3].copy_from_slice(&self.class_probs);
        row[3..].copy_from_slice(&self.clinical);
        row
    }
}
