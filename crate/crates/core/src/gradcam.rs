//! Grad-CAM attribution maps over the convolutional layers.
//!
//! For a scalar target `s` and a conv activation `A` with channels `k`,
//! the channel weights are the spatial means `alpha_k = mean(ds/dA_k)` and
//! the map is `L = relu(sum_k alpha_k * A_k)`, so every cell is
//! non-negative.

use std::fs;
use std::path::Path;

use crate::data::ClassLabel;
use crate::error::{Error, Result};
use crate::pipeline::{
    gradcam_score_stage1, gradcam_score_stage2, CandidateSet, ParamSet, Stage1Config, Stage2Config,
};
use crate::tensor::{BackwardPass, Graph, Tensor, Var};

/// One attribution map at conv-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Row-major `height * width` non-negative weights.
    pub grid: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Conv layer the map was taken from.
    pub layer: String,
    /// Human-readable target the gradient was taken of.
    pub target: String,
}

fn resolve_layer<'a>(available: &[(&'a str, Var)], layer: Option<&str>) -> Result<(&'a str, Var)> {
    match layer {
        None => Ok(*available.last().expect("stages have conv layers")),
        Some(name) => available
            .iter()
            .find(|(n, _)| *n == name)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = available.iter().map(|(n, _)| *n).collect();
                Error::config(format!(
                    "unknown conv layer '{}'; available: {}",
                    name,
                    names.join(", ")
                ))
            }),
    }
}

fn cam_of(pass: &BackwardPass, activation: Var, layer: &str, target: &str) -> Result<Heatmap> {
    let shape = pass.shape(activation);
    if shape.len() != 3 {
        return Err(Error::dim(
            "gradcam",
            format!("conv activation must be [c, h, w], got {:?}", shape),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let value = pass.value(activation);
    let grad = pass
        .grad(activation)
        .ok_or_else(|| Error::contract(format!("no gradient reached layer '{}'", layer)))?;
    let hw = h * w;
    let mut grid = vec![0.0f64; hw];
    for k in 0..c {
        let plane = &value[k * hw..(k + 1) * hw];
        let gplane = &grad[k * hw..(k + 1) * hw];
        let alpha = gplane.iter().sum::<f64>() / hw as f64;
        for (cell, a) in grid.iter_mut().zip(plane) {
            *cell += alpha * a;
        }
    }
    for cell in grid.iter_mut() {
        if *cell < 0.0 {
            *cell = 0.0;
        }
    }
    Ok(Heatmap {
        grid,
        height: h,
        width: w,
        layer: layer.to_string(),
        target: target.to_string(),
    })
}

/// Grad-CAM of the stage-1 infection probability on one preprocessed slice.
/// `layer` defaults to the last conv layer.
pub fn gradcam_stage1(
    params: &ParamSet,
    cfg: &Stage1Config,
    slice: &Tensor,
    layer: Option<&str>,
) -> Result<Heatmap> {
    cfg.validate()?;
    let mut graph = Graph::new();
    let vars = params.enter(&mut graph)?;
    let shape = slice.shape();
    if shape.len() != 2 {
        return Err(Error::dim(
            "gradcam_stage1",
            format!("expected a rank-2 slice, got {:?}", shape),
        ));
    }
    // Enter the slice as a differentiated leaf: conv activations only store
    // gradients on paths that need them, and checkpoint-loaded parameters
    // do not carry `requires_grad`.
    let pixels =
        Tensor::new(vec![1, shape[0], shape[1]], slice.data().to_vec())?.with_grad();
    let input = graph.leaf(&pixels)?;
    let (score, convs) = gradcam_score_stage1(&mut graph, &vars, params, cfg, input)?;
    let (name, activation) = resolve_layer(&convs, layer)?;
    let pass = graph.backward(score)?;
    cam_of(&pass, activation, name, "infectious")
}

/// Grad-CAM of a stage-2 class score over one patient's candidates: the
/// gradient of the gated, max-pooled class score (before normalization)
/// with respect to each candidate's conv maps. Returns one heatmap per
/// candidate, in candidate order; candidates that do not carry the pooled
/// maximum receive all-zero maps.
pub fn gradcam_stage2(
    params: &ParamSet,
    cfg: &Stage2Config,
    candidates: &CandidateSet,
    class: ClassLabel,
    layer: Option<&str>,
) -> Result<Vec<Heatmap>> {
    cfg.validate()?;
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
    let mut inputs = Vec::with_capacity(candidates.k());
    for slice in &candidates.slices {
        let shape = slice.shape();
        if shape.len() != 2 {
            return Err(Error::dim(
                "gradcam_stage2",
                format!("expected rank-2 candidates, got {:?}", shape),
            ));
        }
        // Differentiated leaves for the same reason as in `gradcam_stage1`.
        let pixels =
            Tensor::new(vec![1, shape[0], shape[1]], slice.data().to_vec())?.with_grad();
        inputs.push(graph.leaf(&pixels)?);
    }
    let (score, convs) = gradcam_score_stage2(
        &mut graph,
        &vars,
        params,
        cfg,
        &inputs,
        &candidates.p_inf,
        class.index(),
    )?;
    // Resolve the layer name against the first candidate; all candidates
    // share the architecture.
    let (name, _) = resolve_layer(&convs[0], layer)?;
    let picked: Vec<Var> = convs
        .iter()
        .map(|c| {
            c.iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| *v)
                .expect("layer present for every candidate")
        })
        .collect();
    let pass = graph.backward(score)?;
    picked
        .into_iter()
        .map(|activation| cam_of(&pass, activation, name, class.name()))
        .collect()
}

/// Render a heatmap as an 8-bit binary PGM (P5) image, nearest-neighbor
/// scaled to `target_side`. Values map linearly from `[0, max]` to
/// `[0, 255]` with half-up rounding; an all-zero map renders black.
pub fn render_heatmap(map: &Heatmap, target_side: usize) -> Result<Vec<u8>> {
    if map.grid.len() != map.height * map.width || map.grid.is_empty() {
        return Err(Error::dim(
            "render_heatmap",
            format!(
                "grid of {} cells does not match {}x{}",
                map.grid.len(),
                map.height,
                map.width
            ),
        ));
    }
    if target_side == 0 {
        return Err(Error::config("render target side must be >= 1"));
    }
    if map.grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::contract("heatmap cells must be finite and >= 0"));
    }
    let peak = map.grid.iter().cloned().fold(0.0f64, f64::max);
    let mut bytes = format!("P5\n{} {}\n255\n", target_side, target_side).into_bytes();
    bytes.reserve(target_side * target_side);
    for y in 0..target_side {
        let sy = y * map.height / target_side;
        for x in 0..target_side {
            let sx = x * map.width / target_side;
            let v = map.grid[sy * map.width + sx];
            let level = if peak > 0.0 {
                ((v / peak * 255.0) + 0.5).floor().min(255.0) as u8
            } else {
                0
            };
            bytes.push(level);
        }
    }
    Ok(bytes)
}

/// Render and write a heatmap; see [`render_heatmap`].
pub fn write_heatmap(map: &Heatmap, target_side: usize, path: &Path) -> Result<()> {
    let bytes = render_heatmap(map, target_side)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
