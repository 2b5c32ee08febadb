//! Training loops: Adam updates, patient-level validation splits, batch
//!-normalization running statistics, and best-validation snapshots.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::capsule::{inverse_frequency_weights, margin_loss};
use crate::data::ClassLabel;
use crate::error::{Error, Result};
use crate::pipeline::net::{
    fusion_forward, fusion_params, stage1_forward, stage1_params, stage2_forward, stage2_params,
    BnMode,
};
use crate::pipeline::{CandidateSet, FusionInput, ParamSet, Stage1Config, Stage2Config, TrainSpec};
use crate::rng::SeedStream;
use crate::tensor::{BatchStats, Graph, Tensor, Var};

/// Exponential decay applied to batch-normalization running statistics:
/// `running = MOMENTUM * running + (1 - MOMENTUM) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam optimizer state over named parameters.
pub struct Adam {
    learning_rate: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Apply one update from accumulated gradients. Parameters without a
    /// gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, grad) in grads {
            let tensor = params.get_mut(name)?;
            if !tensor.requires_grad() {
                return Err(Error::contract(format!(
                    "gradient supplied for frozen parameter '{}'",
                    name
                )));
            }
            let values = tensor.data_mut();
            if values.len() != grad.len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("gradient length {} vs parameter {}", grad.len(), values.len()),
                ));
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// One preprocessed slice with its infection flag and owning patient.
#[derive(Debug, Clone)]
pub struct SliceSample {
    /// Index of the owning patient; validation splits at this level.
    pub patient: usize,
    pub pixels: Tensor,
    pub infected: bool,
}

/// Per-epoch loss trace of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
}

/// Trained parameters (best validation epoch) with their loss history.
pub struct TrainedModel {
    pub params: ParamSet,
    pub history: TrainHistory,
}

/// Split `groups` distinct keys into train/validation sets at the group
/// level; validation takes `ceil(fraction * n)` groups, leaving at least one
/// for training.
fn validation_split(
    groups: &BTreeSet<usize>,
    fraction: f64,
    seeds: &SeedStream,
) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    let mut order: Vec<usize> = groups.iter().copied().collect();
    let mut rng = seeds.rng("val_split");
    order.shuffle(&mut rng);
    let n_val = if fraction == 0.0 {
        0
    } else {
        (fraction * order.len() as f64).ceil() as usize
    };
    if n_val >= order.len() {
        return Err(Error::data(format!(
            "validation fraction {} leaves no training groups (have {})",
            fraction,
            order.len()
        )));
    }
    let val: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let train: BTreeSet<usize> = order[n_val..].iter().copied().collect();
    Ok((train, val))
}

fn update_running_stats(params: &mut ParamSet, collected: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, stats) in collected {
        let mean = params.get_mut(&format!("{}.running_mean", prefix))?;
        for (r, b) in mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        let var = params.get_mut(&format!("{}.running_var", prefix))?;
        for (r, b) in var.data_mut().iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
    Ok(())
}

/// Enter a `[h, w]` slice as a constant `[1, h, w]` graph input.
pub(crate) fn chw_input(graph: &mut Graph, slice: &Tensor) -> Result<Var> {
    let shape = slice.shape();
    if shape.len() != 2 {
        return Err(Error::dim(
            "chw_input",
            format!("expected a rank-2 slice, got {:?}", shape),
        ));
    }
    graph.constant(vec![1, shape[0], shape[1]], slice.data().to_vec())
}

fn mean_of(graph: &mut Graph, losses: &[Var]) -> Result<Var> {
    let mut acc = losses[0];
    for loss in &losses[1..] {
        acc = graph.add(acc, *loss)?;
    }
    graph.affine(acc, 1.0 / losses.len() as f64, 0.0)
}

fn collect_grads(
    pass: &crate::tensor::BackwardPass,
    vars: &BTreeMap<String, Var>,
    names: &[String],
) -> BTreeMap<String, Vec<f64>> {
    let mut grads = BTreeMap::new();
    for name in names {
        if let Some(g) = pass.grad(vars[name]) {
            grads.insert(name.clone(), g.to_vec());
        }
    }
    grads
}

/// Track the lowest validation loss seen so far; ties keep the earlier
/// epoch.
struct BestTracker {
    loss: f64,
    epoch: usize,
    params: ParamSet,
}

impl BestTracker {
    fn new(params: &ParamSet) -> Self {
        BestTracker {
            loss: f64::INFINITY,
            epoch: 0,
            params: params.clone(),
        }
    }

    fn observe(&mut self, epoch: usize, loss: f64, params: &ParamSet) {
        if loss < self.loss {
            self.loss = loss;
            self.epoch = epoch;
            self.params = params.clone();
        }
    }
}

/// Train the stage-1 slice classifier. The validation split is drawn at the
/// patient level so slices of one patient never straddle the split.
pub fn train_stage1(
    samples: &[SliceSample],
    cfg: &Stage1Config,
    spec: &TrainSpec,
) -> Result<TrainedModel> {
    cfg.validate()?;
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::data("stage-1 training needs at least one slice"));
    }
    for s in samples {
        if s.pixels.shape() != [cfg.input_side, cfg.input_side] {
            return Err(Error::dim(
                "train_stage1",
                format!(
                    "slice shape {:?} does not match input side {}",
                    s.pixels.shape(),
                    cfg.input_side
                ),
            ));
        }
    }
    let seeds = SeedStream::new(spec.seed);
    let patients: BTreeSet<usize> = samples.iter().map(|s| s.patient).collect();
    let (train_pat, val_pat) = validation_split(&patients, spec.validation_fraction, &seeds)?;
    let train_idx: Vec<usize> = (0..samples.len())
        .filter(|i| train_pat.contains(&samples[*i].patient))
        .collect();
    let val_idx: Vec<usize> = (0..samples.len())
        .filter(|i| val_pat.contains(&samples[*i].patient))
        .collect();

    let n_inf = train_idx.iter().filter(|i| samples[**i].infected).count();
    let n_non = train_idx.len() - n_inf;
    if n_inf == 0 || n_non == 0 {
        return Err(Error::data(format!(
            "stage-1 training split needs both classes, got {} infectious / {} non-infectious",
            n_inf, n_non
        )));
    }
    let weights = inverse_frequency_weights(&[n_inf, n_non])?;

    let mut params = stage1_params(cfg, &seeds)?;
    let trainable = params.trainable();
    let mut adam = Adam::new(spec.learning_rate);
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(spec.epochs),
        val_loss: Vec::with_capacity(spec.epochs),
        best_epoch: 0,
    };
    let mut best = BestTracker::new(&params);

    let target_of = |s: &SliceSample| if s.infected { 0 } else { 1 };

    for epoch in 0..spec.epochs {
        let mut order = train_idx.clone();
        let mut rng = seeds.rng(&format!("epoch{}/shuffle", epoch));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let mut graph = Graph::new();
            let vars = params.enter(&mut graph)?;
            let mut collected = Vec::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let input = chw_input(&mut graph, &samples[i].pixels)?;
                let out = stage1_forward(
                    &mut graph,
                    &vars,
                    &params,
                    cfg,
                    input,
                    &mut BnMode::Train {
                        collected: &mut collected,
                    },
                )?;
                losses.push(margin_loss(
                    &mut graph,
                    out.norms,
                    target_of(&samples[i]),
                    &weights,
                    &cfg.loss,
                )?);
            }
            let loss = mean_of(&mut graph, &losses)?;
            let pass = graph.backward(loss)?;
            epoch_loss += pass.value(loss)[0] * batch.len() as f64;
            let grads = collect_grads(&pass, &vars, &trainable);
            adam.step(&mut params, &grads)?;
            update_running_stats(&mut params, &collected)?;
        }
        history.train_loss.push(epoch_loss / train_idx.len() as f64);

        let val_loss = if val_idx.is_empty() {
            *history.train_loss.last().expect("epoch recorded")
        } else {
            let mut graph = Graph::new();
            let vars = params.enter(&mut graph)?;
            let mut losses = Vec::with_capacity(val_idx.len());
            for &i in &val_idx {
                let input = chw_input(&mut graph, &samples[i].pixels)?;
                let out = stage1_forward(&mut graph, &vars, &params, cfg, input, &mut BnMode::Infer)?;
                losses.push(margin_loss(
                    &mut graph,
                    out.norms,
                    target_of(&samples[i]),
                    &weights,
                    &cfg.loss,
                )?);
            }
            let loss = mean_of(&mut graph, &losses)?;
            graph.value(loss)[0]
        };
        history.val_loss.push(val_loss);
        best.observe(epoch, val_loss, &params);
    }
    history.best_epoch = best.epoch;
    Ok(TrainedModel {
        params: best.params,
        history,
    })
}

/// One patient's stage-2 training example.
#[derive(Debug, Clone)]
pub struct Stage2Sample {
    pub candidates: CandidateSet,
    pub label: ClassLabel,
}

/// Train the stage-2 patient classifier on candidate sets.
pub fn train_stage2(
    samples: &[Stage2Sample],
    cfg: &Stage2Config,
    spec: &TrainSpec,
) -> Result<TrainedModel> {
    cfg.validate()?;
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::data("stage-2 training needs at least one patient"));
    }
    for s in samples {
        s.candidates.validate()?;
        if s.candidates.k() != cfg.candidate_count {
            return Err(Error::config(format!(
                "patient {} has {} candidates, config expects {}",
                s.candidates.patient,
                s.candidates.k(),
                cfg.candidate_count
            )));
        }
        for slice in &s.candidates.slices {
            if slice.shape() != [cfg.input_side, cfg.input_side] {
                return Err(Error::dim(
                    "train_stage2",
                    format!(
                        "candidate shape {:?} does not match input side {}",
                        slice.shape(),
                        cfg.input_side
                    ),
                ));
            }
        }
    }
    let seeds = SeedStream::new(spec.seed);
    let all: BTreeSet<usize> = (0..samples.len()).collect();
    let (train_set, val_set) = validation_split(&all, spec.validation_fraction, &seeds)?;
    let train_idx: Vec<usize> = train_set.into_iter().collect();
    let val_idx: Vec<usize> = val_set.into_iter().collect();

    let mut counts = [0usize; 3];
    for &i in &train_idx {
        counts[samples[i].label.index()] += 1;
    }
    if let Some(missing) = counts.iter().position(|c| *c == 0) {
        return Err(Error::data(format!(
            "stage-2 training split lacks class {}",
            ClassLabel::from_index(missing)?.name()
        )));
    }
    let weights = inverse_frequency_weights(&counts)?;

    let mut params = stage2_params(cfg, &seeds)?;
    let trainable = params.trainable();
    let mut adam = Adam::new(spec.learning_rate);
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(spec.epochs),
        val_loss: Vec::with_capacity(spec.epochs),
        best_epoch: 0,
    };
    let mut best = BestTracker::new(&params);

    // Builds the gated, max-pooled [3] score vector for one patient.
    let patient_scores = |graph: &mut Graph,
                          vars: &BTreeMap<String, Var>,
                          params: &ParamSet,
                          sample: &Stage2Sample,
                          mode: &mut BnMode|
     -> Result<Var> {
        let mut rows = Vec::with_capacity(sample.candidates.k());
        for (slice, p) in sample.candidates.slices.iter().zip(&sample.candidates.p_inf) {
            let input = chw_input(graph, slice)?;
            let out = stage2_forward(graph, vars, params, cfg, input, mode)?;
            let gate = graph.constant(vec![3], vec![*p, *p, 1.0 - *p])?;
            rows.push(graph.mul(out.norms, gate)?);
        }
        let stacked = graph.stack_rows(&rows)?;
        graph.col_max(stacked)
    };

    for epoch in 0..spec.epochs {
        let mut order = train_idx.clone();
        let mut rng = seeds.rng(&format!("epoch{}/shuffle", epoch));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let mut graph = Graph::new();
            let vars = params.enter(&mut graph)?;
            let mut collected = Vec::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let pooled = patient_scores(
                    &mut graph,
                    &vars,
                    &params,
                    &samples[i],
                    &mut BnMode::Train {
                        collected: &mut collected,
                    },
                )?;
                losses.push(margin_loss(
                    &mut graph,
                    pooled,
                    samples[i].label.index(),
                    &weights,
                    &cfg.loss,
                )?);
            }
            let loss = mean_of(&mut graph, &losses)?;
            let pass = graph.backward(loss)?;
            epoch_loss += pass.value(loss)[0] * batch.len() as f64;
            let grads = collect_grads(&pass, &vars, &trainable);
            adam.step(&mut params, &grads)?;
            update_running_stats(&mut params, &collected)?;
        }
        history.train_loss.push(epoch_loss / train_idx.len() as f64);

        let val_loss = if val_idx.is_empty() {
            *history.train_loss.last().expect("epoch recorded")
        } else {
            let mut graph = Graph::new();
            let vars = params.enter(&mut graph)?;
            let mut losses = Vec::with_capacity(val_idx.len());
            for &i in &val_idx {
                let pooled =
                    patient_scores(&mut graph, &vars, &params, &samples[i], &mut BnMode::Infer)?;
                losses.push(margin_loss(
                    &mut graph,
                    pooled,
                    samples[i].label.index(),
                    &weights,
                    &cfg.loss,
                )?);
            }
            let loss = mean_of(&mut graph, &losses)?;
            graph.value(loss)[0]
        };
        history.val_loss.push(val_loss);
        best.observe(epoch, val_loss, &params);
    }
    history.best_epoch = best.epoch;
    Ok(TrainedModel {
        params: best.params,
        history,
    })
}

/// Train the fusion MLP on (stage-2 probabilities, clinical features) rows.
pub fn train_fusion_mlp(
    samples: &[(FusionInput, ClassLabel)],
    spec: &TrainSpec,
) -> Result<TrainedModel> {
    spec.validate()?;
    if samples.len() < 2 {
        return Err(Error::data(
            "fusion training needs at least two patients for batch statistics",
        ));
    }
    if spec.batch_size < 2 {
        return Err(Error::config(
            "fusion batch size must be >= 2 for batch normalization",
        ));
    }
    let seeds = SeedStream::new(spec.seed);
    let all: BTreeSet<usize> = (0..samples.len()).collect();
    let (train_set, val_set) = validation_split(&all, spec.validation_fraction, &seeds)?;
    let train_idx: Vec<usize> = train_set.into_iter().collect();
    let val_idx: Vec<usize> = val_set.into_iter().collect();
    if train_idx.len() < 2 {
        return Err(Error::data(
            "fusion training split needs at least two rows for batch statistics",
        ));
    }
    let mut counts = [0usize; 3];
    for &i in &train_idx {
        counts[samples[i].1.index()] += 1;
    }
    if let Some(missing) = counts.iter().position(|c| *c == 0) {
        return Err(Error::data(format!(
            "fusion training split lacks class {}",
            ClassLabel::from_index(missing)?.name()
        )));
    }

    let mut params = fusion_params(&seeds)?;
    let trainable = params.trainable();
    let mut adam = Adam::new(spec.learning_rate);
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(spec.epochs),
        val_loss: Vec::with_capacity(spec.epochs),
        best_epoch: 0,
    };
    let mut best = BestTracker::new(&params);

    let matrix_of = |idx: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * 11);
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&samples[i].0.to_row());
            targets.push(samples[i].1.index());
        }
        (data, targets)
    };

    for epoch in 0..spec.epochs {
        let mut order = train_idx.clone();
        let mut rng = seeds.rng(&format!("epoch{}/shuffle", epoch));
        order.shuffle(&mut rng);

        // A trailing single-row chunk folds into the previous batch so
        // train-mode batch statistics always see at least two rows.
        let mut batches: Vec<Vec<usize>> = order
            .chunks(spec.batch_size)
            .map(|c| c.to_vec())
            .collect();
        if batches.len() > 1 && batches.last().map(|b| b.len()) == Some(1) {
            let tail = batches.pop().expect("checked non-empty");
            batches.last_mut().expect("len > 1").extend(tail);
        }

        let mut epoch_loss = 0.0;
        for batch in &batches {
            let (data, targets) = matrix_of(batch);
            let mut graph = Graph::new();
            let vars = params.enter(&mut graph)?;
            let mut collected = Vec::new();
            let input = graph.constant(vec![batch.len(), 11], data)?;
            let logits = fusion_forward(
                &mut graph,
                &vars,
                &params,
                input,
                &mut BnMode::Train {
                    collected: &mut collected,
                },
            )?;
            let loss = graph.softmax_cross_entropy(logits, &targets)?;
            let pass = graph.backward(loss)?;
            epoch_loss += pass.value(loss)[0] * batch.len() as f64;
            let grads = collect_grads(&pass, &vars, &trainable);
            adam.step(&mut params, &grads)?;
            update_running_stats(&mut params, &collected)?;
        }
        history.train_loss.push(epoch_loss / train_idx.len() as f64);

        let val_loss = if val_idx.is_empty() {
            *history.train_loss.last().expect("epoch recorded")
        } else {
            let (data, targets) = matrix_of(&val_idx);
            let mut graph = Graph::new();
            let vars = params.enter(&mut graph)?;
            let input = graph.constant(vec![val_idx.len(), 11], data)?;
            let logits = fusion_forward(&mut graph, &vars, &params, input, &mut BnMode::Infer)?;
            let loss = graph.softmax_cross_entropy(logits, &targets)?;
            graph.value(loss)[0]
        };
        history.val_loss.push(val_loss);
        best.observe(epoch, val_loss, &params);
    }
    history.best_epoch = best.epoch;
    Ok(TrainedModel {
        params: best.params,
        history,
    })
}
