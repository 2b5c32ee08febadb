//! Capsule primitives: squash nonlinearity, primary-capsule formation,
//! routing-by-agreement, and the class-weighted margin loss.
//!
//! Routing follows the agreement scheme: logits start at zero, couplings are
//! the softmax of the logits over output capsules, each output capsule is the
//! squash of its coupling-weighted prediction sum, and logits grow by the
//! dot product of prediction and output. Gradients flow through the final
//! couplings as constants; the logit updates themselves carry no gradient.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Squash a single vector: `v = (|s|^2 / (1 + |s|^2)) * s / |s|`, with
/// `squash(0) = 0`. The tensor is treated as one flat vector.
pub fn squash(s: &Tensor) -> Result<Tensor> {
    let n2: f64 = s.data().iter().map(|v| v * v).sum();
    let n = n2.sqrt();
    let f = if n > 0.0 { n / (1.0 + n2) } else { 0.0 };
    Tensor::new(s.shape().to_vec(), s.data().iter().map(|v| f * v).collect())
}

/// A stack of capsules: `values` is a `[count, dim]` tensor.
#[derive(Debug, Clone)]
pub struct CapsuleStack {
    pub count: usize,
    pub dim: usize,
    pub values: Tensor,
}

impl CapsuleStack {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim(
                "capsule_stack",
                format!("expected [count, dim], got {:?}", values.shape()),
            ));
        }
        let (count, dim) = (values.shape()[0], values.shape()[1]);
        Ok(CapsuleStack { count, dim, values })
    }

    /// Snapshot a `[count, dim]` graph node.
    pub fn from_graph(graph: &Graph, v: Var) -> Result<Self> {
        CapsuleStack::new(graph.tensor(v))
    }

    /// Euclidean norm of each capsule.
    pub fn norms(&self) -> Vec<f64> {
        let d = self.dim;
        (0..self.count)
            .map(|i| {
                self.values.data()[i * d..(i + 1) * d]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Group a `[c,h,w]` feature map into squashed primary capsules of dimension
/// `dim`; `dim` must divide `c`. Output has `(c/dim)*h*w` capsules.
pub fn primary_caps(graph: &mut Graph, feature_map: Var, dim: usize) -> Result<Var> {
    let grouped = graph.primary_group(feature_map, dim)?;
    graph.squash_rows(grouped)
}

/// Per-iteration record of one routing run. `couplings` rows sum to one.
#[derive(Debug, Clone)]
pub struct RoutingState {
    pub iterations: usize,
    /// Final routing logits `b`, shape `[n_in, n_out]`.
    pub logits: Tensor,
    /// Coupling coefficients per iteration, each `[n_in, n_out]`; the last
    /// entry is the set actually used to form the returned outputs.
    pub couplings: Vec<Tensor>,
}

/// Rowwise softmax over `[ni, no]` logits stored flat.
fn coupling_softmax(b: &[f64], ni: usize, no: usize) -> Vec<f64> {
    let mut c = vec![0.0; ni * no];
    for i in 0..ni {
        let row = &b[i * no..(i + 1) * no];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..no {
            let e = (row[j] - max).exp();
            c[i * no + j] = e;
            total += e;
        }
        for j in 0..no {
            c[i * no + j] /= total;
        }
    }
    c
}

/// Routing-by-agreement over prediction vectors `[n_in, n_out, d_out]`.
/// Returns the squashed output capsules `[n_out, d_out]` and the routing
/// state. Gradient flows through the final coupling-weighted combination
/// only; couplings are constants in the backward pass.
pub fn routing(graph: &mut Graph, predictions: Var, iterations: usize) -> Result<(Var, RoutingState)> {
    if iterations < 1 {
        return Err(Error::config(format!(
            "routing iterations must be >= 1, got {}",
            iterations
        )));
    }
    let shape = graph.shape(predictions).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(
            "routing",
            format!("predictions must be [n_in, n_out, d_out], got {:?}", shape),
        ));
    }
    let (ni, no, dout) = (shape[0], shape[1], shape[2]);
    let preds = graph.value(predictions).to_vec();

    let mut b = vec![0.0; ni * no];
    let mut history = Vec::with_capacity(iterations);
    let mut out = None;
    for it in 0..iterations {
        let c = coupling_softmax(&b, ni, no);
        history.push(Tensor::new(vec![ni, no], c.clone())?);
        if it + 1 == iterations {
            // Final combination enters the graph; earlier iterations only
            // steer the logits and stay outside it.
            let s = graph.coupled_sum(predictions, &c)?;
            out = Some(graph.squash_rows(s)?);
        } else {
            let mut s = vec![0.0; no * dout];
            for i in 0..ni {
                for j in 0..no {
                    let cij = c[i * no + j];
                    for a in 0..dout {
                        s[j * dout + a] += cij * preds[(i * no + j) * dout + a];
                    }
                }
            }
            let mut v = vec![0.0; no * dout];
            for j in 0..no {
                let row = &s[j * dout..(j + 1) * dout];
                let n2: f64 = row.iter().map(|x| x * x).sum();
                let n = n2.sqrt();
                let f = if n > 0.0 { n / (1.0 + n2) } else { 0.0 };
                for a in 0..dout {
                    v[j * dout + a] = f * row[a];
                }
            }
            for i in 0..ni {
                for j in 0..no {
                    let mut agree = 0.0;
                    for a in 0..dout {
                        agree += preds[(i * no + j) * dout + a] * v[j * dout + a];
                    }
                    b[i * no + j] += agree;
                }
            }
        }
    }

    let state = RoutingState {
        iterations,
        logits: Tensor::new(vec![ni, no], b)?,
        couplings: history,
    };
    Ok((out.expect("iterations >= 1 guarantees a final combination"), state))
}

/// One full capsule layer: predictions from `weights [n_in,n_out,d_out,d_in]`
/// applied to input capsules `[n_in, d_in]`, then routing-by-agreement.
pub fn capsule_layer(
    graph: &mut Graph,
    input: Var,
    weights: Var,
    iterations: usize,
) -> Result<(Var, RoutingState)> {
    let predictions = graph.caps_predict(weights, input)?;
    routing(graph, predictions, iterations)
}

/// Margin-loss hyperparameters. Defaults: `m_plus = 0.9`, `m_minus = 0.1`,
/// `lambda = 0.5`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        MarginLossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.m_minus >= 0.0
            && self.m_minus < self.m_plus
            && self.m_plus <= 1.0
            && self.lambda >= 0.0
            && [self.m_plus, self.m_minus, self.lambda]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "margin loss requires 0 <= m_minus < m_plus <= 1 and lambda >= 0, got m_plus={}, m_minus={}, lambda={}",
                self.m_plus, self.m_minus, self.lambda
            )))
        }
    }
}

/// Class-weighted margin loss over capsule norms `[n_classes]`:
///
/// `L = w_t * max(0, m+ - |v_t|)^2 + lambda * sum_{k != t} w_k * max(0, |v_k| - m-)^2`
///
/// `norms` must hold values in `[0, 1)` (squashed capsule norms); `weights`
/// are per-class loss weights aligned with the class axis.
pub fn margin_loss(
    graph: &mut Graph,
    norms: Var,
    target: usize,
    weights: &[f64],
    cfg: &MarginLossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let shape = graph.shape(norms).to_vec();
    if shape.len() != 1 {
        return Err(Error::dim(
            "margin_loss",
            format!("norms must be rank 1, got {:?}", shape),
        ));
    }
    let classes = shape[0];
    if target >= classes {
        return Err(Error::contract(format!(
            "target class {} out of range for {} classes",
            target, classes
        )));
    }
    if weights.len() != classes {
        return Err(Error::dim(
            "margin_loss",
            format!("{} weights for {} classes", weights.len(), classes),
        ));
    }
    if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
        return Err(Error::contract("margin loss weights must be non-negative"));
    }
    if graph
        .value(norms)
        .iter()
        .any(|v| !(0.0..1.0).contains(v))
    {
        return Err(Error::contract(
            "margin loss expects capsule norms in [0, 1)",
        ));
    }

    // Present hinge:  relu(m+ - v), masked to the target class.
    let present = graph.affine(norms, -1.0, cfg.m_plus)?;
    let present = graph.relu(present)?;
    let present2 = graph.mul(present, present)?;
    let mut pos_mask = vec![0.0; classes];
    pos_mask[target] = weights[target];
    let pos_mask = graph.constant(vec![classes], pos_mask)?;
    let pos = graph.mul(present2, pos_mask)?;
    let pos = graph.sum(pos)?;

    // Absent hinge:  relu(v - m-), masked to the non-target classes.
    let absent = graph.affine(norms, 1.0, -cfg.m_minus)?;
    let absent = graph.relu(absent)?;
    let absent2 = graph.mul(absent, absent)?;
    let mut neg_mask: Vec<f64> = weights.iter().map(|w| cfg.lambda * w).collect();
    neg_mask[target] = 0.0;
    let neg_mask = graph.constant(vec![classes], neg_mask)?;
    let neg = graph.mul(absent2, neg_mask)?;
    let neg = graph.sum(neg)?;

    graph.add(pos, neg)
}

/// Inverse-class-frequency weights, normalized to mean one. `counts` must
/// all be positive.
pub fn inverse_frequency_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::contract("class counts must be non-empty"));
    }
    if counts.iter().any(|c| *c == 0) {
        return Err(Error::data(format!(
            "every class needs at least one sample, got counts {:?}",
            counts
        )));
    }
    let raw: Vec<f64> = counts.iter().map(|c| 1.0 / *c as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}
