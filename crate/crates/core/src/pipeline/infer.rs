//! Inference entry points for trained parameter sets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pipeline::net::{fusion_forward, stage1_forward, stage2_forward, BnMode};
use crate::pipeline::train::chw_input;
use crate::pipeline::{
    gate_and_pool, CandidateSet, FusionInput, GatedDecision, ParamSet, Stage1Config, Stage2Config,
};
use crate::tensor::{Graph, Tensor, Var};

/// Slice-level result of the stage-1 network.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Inference {
    /// `norm_inf / (norm_inf + norm_non)`; defined as 0.5 when both norms
    /// are zero.
    pub p_inf: f64,
    /// Capsule norms: `[infectious, non-infectious]`.
    pub norms: [f64; 2],
}

/// Run stage 1 on one preprocessed slice.
pub fn infer_stage1(
    params: &ParamSet,
    cfg: &Stage1Config,
    slice: &Tensor,
) -> Result<Stage1Inference> {
    let mut graph = Graph::new();
    let vars = params.enter(&mut graph)?;
    let input = chw_input(&mut graph, slice)?;
    let out = stage1_forward(&mut graph, &vars, params, cfg, input, &mut BnMode::Infer)?;
    let norms = graph.value(out.norms);
    let (a, b) = (norms[0], norms[1]);
    let p_inf = if a + b > 0.0 { a / (a + b) } else { 0.5 };
    Ok(Stage1Inference { p_inf, norms: [a, b] })
}

/// Patient-level result of the stage-2 network.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Inference {
    /// Class capsule norms per candidate, `[covid, cap, normal]`.
    pub norms: Vec<[f64; 3]>,
    pub gated: GatedDecision,
}

/// Run stage 2 on one patient's candidate set.
pub fn infer_stage2(
    params: &ParamSet,
    cfg: &Stage2Config,
    candidates: &CandidateSet,
) -> Result<Stage2Inference> {
    candidates.validate()?;
    if candidates.k() != cfg.candidate_count {
        return Err(Error::config(format!(
            "patient {} has {} candidates, config expects {}",
            candidates.patient,
            candidates.k(),
            cfg.candidate_count
        )));
    }
    let mut graph = Graph::new();
    let vars = params.enter(&mut graph)?;
    let mut norms = Vec::with_capacity(candidates.k());
    for slice in &candidates.slices {
        let input = chw_input(&mut graph, slice)?;
        let out = stage2_forward(&mut graph, &vars, params, cfg, input, &mut BnMode::Infer)?;
        let v = graph.value(out.norms);
        norms.push([v[0], v[1], v[2]]);
    }
    let gated = gate_and_pool(&norms, &candidates.p_inf)?;
    Ok(Stage2Inference { norms, gated })
}

/// Fusion-MLP result for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInference {
    pub probs: [f64; 3],
    /// Argmax of the probabilities (first index on exact ties).
    pub decision: usize,
}

/// Run the fusion MLP on one input row.
pub fn infer_fusion(params: &ParamSet, input: &FusionInput) -> Result<FusionInference> {
    let mut graph = Graph::new();
    let vars = params.enter(&mut graph)?;
    let row = graph.constant(vec![1, 11], input.to_row().to_vec())?;
    let logits = fusion_forward(&mut graph, &vars, params, row, &mut BnMode::Infer)?;
    let probs_var = graph.softmax_axis(logits, 1)?;
    let p = graph.value(probs_var);
    let probs = [p[0], p[1], p[2]];
    let mut decision = 0;
    for c in 1..3 {
        if probs[c] > probs[decision] {
            decision = c;
        }
    }
    Ok(FusionInference { probs, decision })
}

/// Build the stage-1 Grad-CAM target on an already-entered input var:
/// the infection probability `n_inf / (n_inf + n_non)`, plus the named conv
/// activations it depends on.
pub fn gradcam_score_stage1(
    graph: &mut Graph,
    vars: &BTreeMap<String, Var>,
    params: &ParamSet,
    cfg: &Stage1Config,
    input: Var,
) -> Result<(Var, Vec<(&'static str, Var)>)> {
    let out = stage1_forward(graph, vars, params, cfg, input, &mut BnMode::Infer)?;
    let n_inf = graph.pick(out.norms, 0)?;
    let n_non = graph.pick(out.norms, 1)?;
    let total = graph.add(n_inf, n_non)?;
    let score = graph.div(n_inf, total)?;
    Ok((score, out.convs))
}

/// Build the stage-2 Grad-CAM target over one patient's candidates: the
/// gated, max-pooled score of `class` before normalization. Returns the
/// named conv activations of every candidate.
pub fn gradcam_score_stage2(
    graph: &mut Graph,
    vars: &BTreeMap<String, Var>,
    params: &ParamSet,
    cfg: &Stage2Config,
    inputs: &[Var],
    p_inf: &[f64],
    class: usize,
) -> Result<(Var, Vec<Vec<(&'static str, Var)>>)> {
    if inputs.is_empty() || inputs.len() != p_inf.len() {
        return Err(Error::dim(
            "gradcam_score_stage2",
            format!("{} inputs vs {} probabilities", inputs.len(), p_inf.len()),
        ));
    }
    if class > 2 {
        return Err(Error::config(format!("class index {} outside 0..=2", class)));
    }
    let mut rows = Vec::with_capacity(inputs.len());
    let mut convs = Vec::with_capacity(inputs.len());
    for (input, p) in inputs.iter().zip(p_inf) {
        let out = stage2_forward(graph, vars, params, cfg, *input, &mut BnMode::Infer)?;
        let gate = graph.constant(vec![3], vec![*p, *p, 1.0 - *p])?;
        rows.push(graph.mul(out.norms, gate)?);
        convs.push(out.convs);
    }
    let stacked = graph.stack_rows(&rows)?;
    let pooled = graph.col_max(stacked)?;
    let score = graph.pick(pooled, class)?;
    Ok((score, convs))
}
