//! Parameter initialization and graph builders for the stage-1, stage-2,
//! and fusion networks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::capsule::{capsule_layer, primary_caps, RoutingState};
use crate::error::{Error, Result};
use crate::pipeline::{ParamSet, Stage1Config, Stage2Config};
use crate::rng::SeedStream;
use crate::tensor::{BatchStats, Graph, Tensor, Var};

/// Batch-normalization epsilon shared by training and inference.
pub const BN_EPS: f64 = 1e-5;
/// Width of each fusion-MLP hidden layer.
pub const FUSION_HIDDEN: usize = 64;
/// Number of hidden fully-connected blocks in the fusion MLP.
pub const FUSION_LAYERS: usize = 4;

fn he_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let sd = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, sd).map_err(|_| Error::config("bad init spread"))?;
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::new(shape, data)?.with_grad())
}

/// Capsule prediction weights use spread 1/sqrt(input capsule count) so the
/// coupled sums start inside the sensitive range of squash.
fn caps_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, n_in: usize) -> Result<Tensor> {
    let sd = 1.0 / (n_in as f64).sqrt();
    let dist = Normal::new(0.0, sd).map_err(|_| Error::config("bad init spread"))?;
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::new(shape, data)?.with_grad())
}

fn zeros_grad(shape: Vec<usize>) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}

fn bn_entries(params: &mut ParamSet, channels: usize) -> Result<()> {
    let mut gamma = Tensor::filled(vec![channels], 1.0)?;
    gamma.set_requires_grad(true);
    params.insert("bn.gamma", gamma)?;
    params.insert("bn.beta", zeros_grad(vec![channels]))?;
    params.insert("bn.running_mean", Tensor::zeros(vec![channels]))?;
    params.insert("bn.running_var", Tensor::filled(vec![channels], 1.0)?)?;
    Ok(())
}

/// Fresh stage-1 parameters drawn from named streams of `seeds`.
pub fn stage1_params(cfg: &Stage1Config, seeds: &SeedStream) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let ch = cfg.conv_channels;
    let pooled: Vec<usize> = cfg
        .shortcuts
        .iter()
        .map(|(from, _)| ch[from - 1])
        .collect();
    // Conv input channels once shortcut concatenation is applied.
    let mut in_ch = [1usize, ch[0], ch[1], ch[2]];
    for (i, (_, to)) in cfg.shortcuts.iter().enumerate() {
        in_ch[to - 1] += pooled[i];
    }
    for layer in 0..4 {
        let name = format!("conv{}.kernel", layer + 1);
        let mut rng = seeds.rng(&format!("init/{}", name));
        let shape = vec![ch[layer], in_ch[layer], 3, 3];
        let fan_in = in_ch[layer] * 9;
        params.insert(&name, he_normal(&mut rng, shape, fan_in)?)?;
        params.insert(&format!("conv{}.bias", layer + 1), zeros_grad(vec![ch[layer]]))?;
    }
    bn_entries(&mut params, ch[3])?;
    let caps = cfg.capsules;
    for layer in 1..3 {
        let name = format!("caps{}.weight", layer);
        let mut rng = seeds.rng(&format!("init/{}", name));
        let shape = vec![
            caps[layer - 1].count,
            caps[layer].count,
            caps[layer].dim,
            caps[layer - 1].dim,
        ];
        params.insert(&name, caps_normal(&mut rng, shape, caps[layer - 1].count)?)?;
    }
    Ok(params)
}

/// Fresh stage-2 parameters drawn from named streams of `seeds`.
pub fn stage2_params(cfg: &Stage2Config, seeds: &SeedStream) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let ch = cfg.conv_channels;
    let in_ch = [1usize, ch[0], ch[1]];
    for layer in 0..3 {
        let name = format!("conv{}.kernel", layer + 1);
        let mut rng = seeds.rng(&format!("init/{}", name));
        let shape = vec![ch[layer], in_ch[layer], 3, 3];
        params.insert(&name, he_normal(&mut rng, shape, in_ch[layer] * 9)?)?;
        params.insert(&format!("conv{}.bias", layer + 1), zeros_grad(vec![ch[layer]]))?;
    }
    bn_entries(&mut params, ch[2])?;
    let primary = crate::pipeline::CapsSpec {
        count: cfg.primary_count(),
        dim: cfg.primary_caps_dim,
    };
    let specs = [primary, cfg.capsules[0], cfg.capsules[1]];
    for layer in 1..3 {
        let name = format!("caps{}.weight", layer);
        let mut rng = seeds.rng(&format!("init/{}", name));
        let shape = vec![
            specs[layer - 1].count,
            specs[layer].count,
            specs[layer].dim,
            specs[layer - 1].dim,
        ];
        params.insert(&name, caps_normal(&mut rng, shape, specs[layer - 1].count)?)?;
    }
    Ok(params)
}

/// Fresh fusion-MLP parameters: four FC(64)+BN blocks on 11 inputs, then a
/// 3-unit output layer.
pub fn fusion_params(seeds: &SeedStream) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    let mut fan_in = 11usize;
    for layer in 0..FUSION_LAYERS {
        let name = format!("fc{}.weight", layer + 1);
        let mut rng = seeds.rng(&format!("init/{}", name));
        params.insert(&name, he_normal(&mut rng, vec![fan_in, FUSION_HIDDEN], fan_in)?)?;
        params.insert(&format!("fc{}.bias", layer + 1), zeros_grad(vec![FUSION_HIDDEN]))?;
        let mut gamma = Tensor::filled(vec![FUSION_HIDDEN], 1.0)?;
        gamma.set_requires_grad(true);
        params.insert(&format!("bn{}.gamma", layer + 1), gamma)?;
        params.insert(&format!("bn{}.beta", layer + 1), zeros_grad(vec![FUSION_HIDDEN]))?;
        params.insert(
            &format!("bn{}.running_mean", layer + 1),
            Tensor::zeros(vec![FUSION_HIDDEN]),
        )?;
        params.insert(
            &format!("bn{}.running_var", layer + 1),
            Tensor::filled(vec![FUSION_HIDDEN], 1.0)?,
        )?;
        fan_in = FUSION_HIDDEN;
    }
    let mut rng = seeds.rng("init/out.weight");
    params.insert("out.weight", he_normal(&mut rng, vec![FUSION_HIDDEN, 3], FUSION_HIDDEN)?)?;
    params.insert("out.bias", zeros_grad(vec![3]))?;
    Ok(params)
}

/// Whether a forward pass normalizes with per-input batch statistics
/// (collecting them for running updates) or with stored running statistics.
pub enum BnMode<'a> {
    Train {
        collected: &'a mut Vec<(String, BatchStats)>,
    },
    Infer,
}

/// Forward-pass outputs of one stage on one input slice.
pub struct StageVars {
    /// Post-activation conv maps by layer name, for Grad-CAM.
    pub convs: Vec<(&'static str, Var)>,
    /// Class capsule vectors, `[count, dim]`.
    pub caps: Var,
    /// Class capsule norms.
    pub norms: Var,
    /// Routing state of each routed layer.
    pub routing: Vec<RoutingState>,
}

fn batchnorm(
    graph: &mut Graph,
    vars: &BTreeMap<String, Var>,
    params: &ParamSet,
    prefix: &str,
    x: Var,
    mode: &mut BnMode,
) -> Result<Var> {
    let gamma = vars[&format!("{}.gamma", prefix)];
    let beta = vars[&format!("{}.beta", prefix)];
    match mode {
        BnMode::Train { collected } => {
            let (y, stats) = graph.batchnorm_train(x, gamma, beta, BN_EPS)?;
            collected.push((prefix.to_string(), stats));
            Ok(y)
        }
        BnMode::Infer => {
            let mean = params.get(&format!("{}.running_mean", prefix))?;
            let var = params.get(&format!("{}.running_var", prefix))?;
            graph.batchnorm_infer(x, gamma, beta, mean.data(), var.data(), BN_EPS)
        }
    }
}

/// Conv maps are normalized over their spatial positions: each (h, w) site
/// is one row, each channel one feature column.
fn batchnorm_chw(
    graph: &mut Graph,
    vars: &BTreeMap<String, Var>,
    params: &ParamSet,
    prefix: &str,
    x: Var,
    h: usize,
    w: usize,
    mode: &mut BnMode,
) -> Result<Var> {
    let flat = graph.chw_to_nf(x)?;
    let normed = batchnorm(graph, vars, params, prefix, flat, mode)?;
    graph.nf_to_chw(normed, h, w)
}

/// Build the stage-1 forward pass for one `[1, side, side]` input var.
pub fn stage1_forward(
    graph: &mut Graph,
    vars: &BTreeMap<String, Var>,
    params: &ParamSet,
    cfg: &Stage1Config,
    input: Var,
    mode: &mut BnMode,
) -> Result<StageVars> {
    let side = cfg.input_side;
    if graph.shape(input) != [1, side, side] {
        return Err(Error::dim(
            "stage1_forward",
            format!(
                "input shape {:?} does not match configured side {}",
                graph.shape(input),
                side
            ),
        ));
    }
    let conv = |graph: &mut Graph, layer: usize, x: Var| -> Result<Var> {
        let k = vars[&format!("conv{}.kernel", layer)];
        let b = vars[&format!("conv{}.bias", layer)];
        let y = graph.conv2d(x, k, 1, 1)?;
        graph.bias_channel(y, b)
    };

    let a1 = conv(graph, 1, input)?;
    let a1 = graph.relu(a1)?;
    let a2 = conv(graph, 2, a1)?;
    let a2 = graph.relu(a2)?;
    let p1 = graph.maxpool2d(a1, cfg.pool_window, cfg.pool_window)?;
    let p2 = graph.maxpool2d(a2, cfg.pool_window, cfg.pool_window)?;
    let pooled = [p1, p2];
    let full = [a1, a2];

    // Shortcut sources aligned to the pooled grid when they originate
    // before the pool.
    let source = |idx: usize| -> Var {
        if idx <= 2 {
            pooled[idx - 1]
        } else {
            full[idx - 1]
        }
    };

    let mut in3 = p2;
    for (from, to) in cfg.shortcuts {
        if to == 3 {
            in3 = graph.concat_channels(in3, source(from))?;
        }
    }
    let a3 = conv(graph, 3, in3)?;
    let a3 = graph.relu(a3)?;

    let mut in4 = a3;
    for (from, to) in cfg.shortcuts {
        if to == 4 {
            in4 = graph.concat_channels(in4, source(from))?;
        }
    }
    let a4 = conv(graph, 4, in4)?;
    let pooled_side = cfg.pooled_side();
    let a4 = batchnorm_chw(graph, vars, params, "bn", a4, pooled_side, pooled_side, mode)?;
    let a4 = graph.relu(a4)?;

    let primary = primary_caps(graph, a4, cfg.capsules[0].dim)?;
    let mut caps = primary;
    let mut routing = Vec::new();
    for layer in 1..3 {
        let w = vars[&format!("caps{}.weight", layer)];
        let (next, state) = capsule_layer(graph, caps, w, cfg.routing_iterations)?;
        caps = next;
        routing.push(state);
    }
    let norms = graph.norm_rows(caps)?;
    Ok(StageVars {
        convs: vec![("conv1", a1), ("conv2", a2), ("conv3", a3), ("conv4", a4)],
        caps,
        norms,
        routing,
    })
}

/// Build the stage-2 forward pass for one `[1, side, side]` candidate var.
pub fn stage2_forward(
    graph: &mut Graph,
    vars: &BTreeMap<String, Var>,
    params: &ParamSet,
    cfg: &Stage2Config,
    input: Var,
    mode: &mut BnMode,
) -> Result<StageVars> {
    let side = cfg.input_side;
    if graph.shape(input) != [1, side, side] {
        return Err(Error::dim(
            "stage2_forward",
            format!(
                "input shape {:?} does not match configured side {}",
                graph.shape(input),
                side
            ),
        ));
    }
    let conv = |graph: &mut Graph, layer: usize, x: Var| -> Result<Var> {
        let k = vars[&format!("conv{}.kernel", layer)];
        let b = vars[&format!("conv{}.bias", layer)];
        let y = graph.conv2d(x, k, 1, 1)?;
        graph.bias_channel(y, b)
    };
    let a1 = conv(graph, 1, input)?;
    let a1 = graph.relu(a1)?;
    let p1 = graph.maxpool2d(a1, cfg.pool_window, cfg.pool_window)?;
    let a2 = conv(graph, 2, p1)?;
    let a2 = graph.relu(a2)?;
    let a3 = conv(graph, 3, a2)?;
    let pooled_side = cfg.pooled_side();
    let a3 = batchnorm_chw(graph, vars, params, "bn", a3, pooled_side, pooled_side, mode)?;
    let a3 = graph.relu(a3)?;

    let primary = primary_caps(graph, a3, cfg.primary_caps_dim)?;
    let mut caps = primary;
    let mut routing = Vec::new();
    for layer in 1..3 {
        let w = vars[&format!("caps{}.weight", layer)];
        let (next, state) = capsule_layer(graph, caps, w, cfg.routing_iterations)?;
        caps = next;
        routing.push(state);
    }
    let norms = graph.norm_rows(caps)?;
    Ok(StageVars {
        convs: vec![("conv1", a1), ("conv2", a2), ("conv3", a3)],
        caps,
        norms,
        routing,
    })
}

/// Build the fusion MLP on a `[rows, 11]` input var; returns `[rows, 3]`
/// logits. Train mode requires at least two rows for batch statistics.
pub fn fusion_forward(
    graph: &mut Graph,
    vars: &BTreeMap<String, Var>,
    params: &ParamSet,
    input: Var,
    mode: &mut BnMode,
) -> Result<Var> {
    let shape = graph.shape(input).to_vec();
    if shape.len() != 2 || shape[1] != 11 {
        return Err(Error::dim(
            "fusion_forward",
            format!("expected [rows, 11] input, got {:?}", shape),
        ));
    }
    let mut x = input;
    for layer in 1..=FUSION_LAYERS {
        let w = vars[&format!("fc{}.weight", layer)];
        let b = vars[&format!("fc{}.bias", layer)];
        x = graph.matmul(x, w)?;
        x = graph.bias_row(x, b)?;
        x = batchnorm(graph, vars, params, &format!("bn{}", layer), x, mode)?;
        x = graph.relu(x)?;
    }
    let w = vars["out.weight"];
    let b = vars["out.bias"];
    x = graph.matmul(x, w)?;
    graph.bias_row(x, b)
}
