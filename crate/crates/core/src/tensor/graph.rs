use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-feature statistics of one batch-normalization forward pass in
/// training mode. Variance is the biased (population) estimate.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine {
        x: usize,
        mul: f64,
    },
    Relu(usize),
    Sigmoid(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BiasRow {
        x: usize,
        bias: usize,
        rows: usize,
        cols: usize,
    },
    BiasChannel {
        x: usize,
        bias: usize,
        c: usize,
        hw: usize,
    },
    Conv2d {
        input: usize,
        kernels: usize,
        dims: ConvDims,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        rows: usize,
        cols: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormInfer {
        x: usize,
        gamma: usize,
        beta: usize,
        rows: usize,
        cols: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxAxis {
        x: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    Sum(usize),
    NormRows {
        x: usize,
        rows: usize,
        cols: usize,
    },
    SquashRows {
        x: usize,
        rows: usize,
        cols: usize,
    },
    ChwToNf {
        x: usize,
        c: usize,
        hw: usize,
    },
    NfToChw {
        x: usize,
        c: usize,
        hw: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
        ca: usize,
        cb: usize,
        hw: usize,
    },
    PrimaryGroup {
        x: usize,
        groups: usize,
        dim: usize,
        hw: usize,
    },
    CapsPredict {
        weights: usize,
        input: usize,
        ni: usize,
        no: usize,
        dout: usize,
        din: usize,
    },
    CoupledSum {
        preds: usize,
        couplings: Vec<f64>,
        ni: usize,
        no: usize,
        dout: usize,
    },
    StackRows {
        parts: Vec<usize>,
        cols: usize,
    },
    ColMax {
        x: usize,
        cols: usize,
        argrow: Vec<usize>,
    },
    Pick {
        x: usize,
        index: usize,
    },
    Reshape {
        x: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::MatMul { .. } => "matmul",
            Op::BiasRow { .. } => "bias_row",
            Op::BiasChannel { .. } => "bias_channel",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormInfer { .. } => "batchnorm_infer",
            Op::SoftmaxAxis { .. } => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(..) => "sum",
            Op::NormRows { .. } => "norm_rows",
            Op::SquashRows { .. } => "squash_rows",
            Op::ChwToNf { .. } => "chw_to_nf",
            Op::NfToChw { .. } => "nf_to_chw",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::PrimaryGroup { .. } => "primary_group",
            Op::CapsPredict { .. } => "caps_predict",
            Op::CoupledSum { .. } => "coupled_sum",
            Op::StackRows { .. } => "stack_rows",
            Op::ColMax { .. } => "col_max",
            Op::Pick { .. } => "pick",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs: bool,
}

/// Operation record. Values are computed eagerly as operations are entered;
/// [`Graph::backward`] consumes the record and replays it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_finite(values: &[f64], op: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(op))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Snapshot a node as a tensor (no gradient attached).
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone())
            .expect("graph nodes hold validated finite values")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        ensure_finite(&value, op.name())?;
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    /// Enter a tensor as a graph input. Gradients are produced for it iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Enter raw values as a non-differentiated input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "constant",
                format!("shape {:?} vs {} values", shape, data.len()),
            ));
        }
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, value: f64) -> Result<Var> {
        self.constant(vec![1], vec![value])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dim(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Add(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Mul(a.0, b.0), needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x / y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Div(a.0, b.0), needs)
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        if !mul.is_finite() || !add.is_finite() {
            return Err(Error::contract("affine coefficients must be finite"));
        }
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| mul * v + add).collect();
        let needs = self.needs(x);
        self.push(
            self.nodes[x.0].shape.clone(),
            value,
            Op::Affine { x: x.0, mul },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Relu(x.0), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let needs = self.needs(x);
        self.push(self.nodes[x.0].shape.clone(), value, Op::Sigmoid(x.0), needs)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut value[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            needs,
        )
    }

    /// `[rows,cols] + [cols]`, bias added to every row.
    pub fn bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::dim("bias_row", format!("{:?} + {:?}", sx, sb)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bv = &self.nodes[bias.0].value;
        let mut value = self.nodes[x.0].value.clone();
        for r in 0..rows {
            for c in 0..cols {
                value[r * cols + c] += bv[c];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(
            vec![rows, cols],
            value,
            Op::BiasRow {
                x: x.0,
                bias: bias.0,
                rows,
                cols,
            },
            needs,
        )
    }

    /// `[c,h,w] + [c]`, one bias per channel plane.
    pub fn bias_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[bias.0].shape);
        if sx.len() != 3 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::dim("bias_channel", format!("{:?} + {:?}", sx, sb)));
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let bv = &self.nodes[bias.0].value;
        let mut value = self.nodes[x.0].value.clone();
        for ch in 0..c {
            let b = bv[ch];
            for v in &mut value[ch * hw..(ch + 1) * hw] {
                *v += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(
            sx.clone(),
            value,
            Op::BiasChannel {
                x: x.0,
                bias: bias.0,
                c,
                hw,
            },
            needs,
        )
    }

    /// Cross-correlation of `[ci,h,w]` with kernels `[co,ci,kh,kw]`
    /// (no kernel flip). Zero padding, floor output extents.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (&self.nodes[input.0].shape, &self.nodes[kernels.0].shape);
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?}, kernels {:?}", si, sk),
            ));
        }
        if sk[1] != si[0] {
            return Err(Error::dim(
                "conv2d",
                format!("input channels {} vs kernel channels {}", si[0], sk[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    kh,
                    kw,
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let dims = ConvDims {
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        };
        let value = conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[kernels.0].value,
            &dims,
        );
        let needs = self.needs(input) || self.needs(kernels);
        self.push(
            vec![co, ho, wo],
            value,
            Op::Conv2d {
                input: input.0,
                kernels: kernels.0,
                dims,
            },
            needs,
        )
    }

    /// Channelwise max pooling of `[c,h,w]`, no padding, floor extents.
    /// Ties within a window resolve to the first element in row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let si = &self.nodes[input.0].shape;
        if si.len() != 3 {
            return Err(Error::dim("maxpool2d", format!("input {:?}", si)));
        }
        if window == 0 || stride == 0 {
            return Err(Error::config("maxpool2d window and stride must be >= 1"));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        if window > h || window > w {
            return Err(Error::dim(
                "maxpool2d",
                format!("window {} exceeds input {}x{}", window, h, w),
            ));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let iv = &self.nodes[input.0].value;
        let mut value = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                            if iv[idx] > best {
                                best = iv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    value[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            vec![c, ho, wo],
            value,
            Op::MaxPool2d {
                input: input.0,
                argmax,
            },
            needs,
        )
    }

    /// Training-mode batch normalization over `[rows,cols]` with per-column
    /// batch statistics (biased variance). Returns the normalized output and
    /// the batch statistics so the caller can maintain running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (rows, cols) = self.batchnorm_check(x, gamma, beta, eps)?;
        if rows < 2 {
            return Err(Error::dim(
                "batchnorm_train",
                format!("need at least 2 rows, got {}", rows),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += xv[r * cols + c];
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = xv[r * cols + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let xhat = (xv[r * cols + c] - mean[c]) * inv_std[c];
                value[r * cols + c] = gv[c] * xhat + bv[c];
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            vec![rows, cols],
            value,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                rows,
                cols,
                mean,
                inv_std,
            },
            needs,
        )?;
        Ok((out, stats))
    }

    /// Inference-mode batch normalization using fixed (running) statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (rows, cols) = self.batchnorm_check(x, gamma, beta, eps)?;
        if mean.len() != cols || var.len() != cols {
            return Err(Error::dim(
                "batchnorm_infer",
                format!(
                    "running stats of length {}/{} for {} columns",
                    mean.len(),
                    var.len(),
                    cols
                ),
            ));
        }
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::contract("batchnorm_infer: negative running variance"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let xhat = (xv[r * cols + c] - mean[c]) * inv_std[c];
                value[r * cols + c] = gv[c] * xhat + bv[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            vec![rows, cols],
            value,
            Op::BatchNormInfer {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                rows,
                cols,
                mean: mean.to_vec(),
                inv_std,
            },
            needs,
        )
    }

    fn batchnorm_check(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(usize, usize)> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(Error::dim("batchnorm", format!("input {:?}", sx)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[v.0].shape;
            if s.len() != 1 || s[0] != cols {
                return Err(Error::dim(
                    "batchnorm",
                    format!("{} {:?} for {} columns", name, s, cols),
                ));
            }
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::config("batchnorm epsilon must be positive"));
        }
        Ok((rows, cols))
    }

    /// Softmax along `axis` with max-subtraction for stability.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if axis >= sx.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {} for shape {:?}", axis, sx),
            ));
        }
        let outer: usize = sx[..axis].iter().product();
        let axis_len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * axis_len + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..axis_len {
                    max = max.max(xv[at(l)]);
                }
                let mut total = 0.0;
                for l in 0..axis_len {
                    let e = (xv[at(l)] - max).exp();
                    value[at(l)] = e;
                    total += e;
                }
                for l in 0..axis_len {
                    value[at(l)] /= total;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            sx,
            value,
            Op::SoftmaxAxis {
                x: x.0,
                outer,
                axis_len,
                inner,
            },
            needs,
        )
    }

    /// Mean over rows of softmax cross-entropy between `logits [n,c]` and
    /// integer targets. Stable log-sum-exp formulation.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = &self.nodes[logits.0].shape;
        if sl.len() != 2 {
            return Err(Error::dim("softmax_cross_entropy", format!("logits {:?}", sl)));
        }
        let (rows, cols) = (sl[0], sl[1]);
        if targets.len() != rows {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), rows),
            ));
        }
        if rows == 0 {
            return Err(Error::contract("softmax_cross_entropy: empty batch"));
        }
        if let Some(t) = targets.iter().find(|t| **t >= cols) {
            return Err(Error::contract(format!(
                "target class {} out of range for {} classes",
                t, cols
            )));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                probs[r * cols + c] = e;
                total += e;
            }
            for c in 0..cols {
                probs[r * cols + c] /= total;
            }
            loss += max + total.ln() - row[targets[r]];
        }
        loss /= rows as f64;
        let needs = self.needs(logits);
        self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                rows,
                cols,
            },
            needs,
        )
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.nodes[x.0].value.iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![total], Op::Sum(x.0), needs)
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s = self.sum(x)?;
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Euclidean norm of each row of `[rows,cols]`, as `[rows]`.
    pub fn norm_rows(&mut self, x: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(Error::dim("norm_rows", format!("input {:?}", sx)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value;
        let value: Vec<f64> = (0..rows)
            .map(|r| {
                xv[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let needs = self.needs(x);
        self.push(
            vec![rows],
            value,
            Op::NormRows {
                x: x.0,
                rows,
                cols,
            },
            needs,
        )
    }

    /// Squash nonlinearity applied to each row:
    /// `v = (|s|^2 / (1+|s|^2)) * s/|s|`, zero at `s = 0`.
    pub fn squash_rows(&mut self, x: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 {
            return Err(Error::dim("squash_rows", format!("input {:?}", sx)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            // v = n/(1+n^2) * s; the factor tends to 0 with n, so 0 maps to 0
            let f = if n > 0.0 { n / (1.0 + n * n) } else { 0.0 };
            for c in 0..cols {
                value[r * cols + c] = f * row[c];
            }
        }
        let needs = self.needs(x);
        self.push(
            vec![rows, cols],
            value,
            Op::SquashRows {
                x: x.0,
                rows,
                cols,
            },
            needs,
        )
    }

    /// `[c,h,w] -> [h*w, c]`: spatial positions become rows. Pairs with
    /// [`Graph::nf_to_chw`] to apply row-based operations to feature maps.
    pub fn chw_to_nf(&mut self, x: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 3 {
            return Err(Error::dim("chw_to_nf", format!("input {:?}", sx)));
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; xv.len()];
        for ch in 0..c {
            for p in 0..hw {
                value[p * c + ch] = xv[ch * hw + p];
            }
        }
        let needs = self.needs(x);
        self.push(
            vec![hw, c],
            value,
            Op::ChwToNf { x: x.0, c, hw },
            needs,
        )
    }

    /// Inverse of [`Graph::chw_to_nf`]: `[h*w, c] -> [c,h,w]`.
    pub fn nf_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 || sx[0] != h * w {
            return Err(Error::dim(
                "nf_to_chw",
                format!("input {:?} for {}x{} target", sx, h, w),
            ));
        }
        let (hw, c) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; xv.len()];
        for ch in 0..c {
            for p in 0..hw {
                value[ch * hw + p] = xv[p * c + ch];
            }
        }
        let needs = self.needs(x);
        self.push(
            vec![c, h, w],
            value,
            Op::NfToChw { x: x.0, c, hw },
            needs,
        )
    }

    /// Concatenate `[ca,h,w]` and `[cb,h,w]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::dim(
                "concat_channels",
                format!("{:?} vs {:?}", sa, sb),
            ));
        }
        let (ca, cb, hw) = (sa[0], sb[0], sa[1] * sa[2]);
        let mut value = Vec::with_capacity((ca + cb) * hw);
        value.extend_from_slice(&self.nodes[a.0].value);
        value.extend_from_slice(&self.nodes[b.0].value);
        let shape = vec![ca + cb, sa[1], sa[2]];
        let needs = self.needs(a) || self.needs(b);
        self.push(
            shape,
            value,
            Op::ConcatChannels {
                a: a.0,
                b: b.0,
                ca,
                cb,
                hw,
            },
            needs,
        )
    }

    /// Group a `[c,h,w]` map into capsules of dimension `dim` by splitting
    /// channels into `c/dim` groups; each group contributes one capsule per
    /// spatial position. Output is `[(c/dim)*h*w, dim]`.
    pub fn primary_group(&mut self, x: Var, dim: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 3 {
            return Err(Error::dim("primary_group", format!("input {:?}", sx)));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        if dim == 0 || c % dim != 0 {
            return Err(Error::config(format!(
                "capsule dimension {} must divide channel count {}",
                dim, c
            )));
        }
        let groups = c / dim;
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; xv.len()];
        for g in 0..groups {
            for p in 0..hw {
                for e in 0..dim {
                    value[(g * hw + p) * dim + e] = xv[(g * dim + e) * hw + p];
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            vec![groups * hw, dim],
            value,
            Op::PrimaryGroup {
                x: x.0,
                groups,
                dim,
                hw,
            },
            needs,
        )
    }

    /// Prediction vectors `u_hat[i,j] = W[i,j] @ u[i]` for routing:
    /// weights `[ni,no,dout,din]`, input capsules `[ni,din]`, output
    /// `[ni,no,dout]`.
    pub fn caps_predict(&mut self, weights: Var, input: Var) -> Result<Var> {
        let (sw, su) = (&self.nodes[weights.0].shape, &self.nodes[input.0].shape);
        if sw.len() != 4 || su.len() != 2 || sw[0] != su[0] || sw[3] != su[1] {
            return Err(Error::dim(
                "caps_predict",
                format!("weights {:?}, input {:?}", sw, su),
            ));
        }
        let (ni, no, dout, din) = (sw[0], sw[1], sw[2], sw[3]);
        let (wv, uv) = (&self.nodes[weights.0].value, &self.nodes[input.0].value);
        let mut value = vec![0.0; ni * no * dout];
        for i in 0..ni {
            let u = &uv[i * din..(i + 1) * din];
            for j in 0..no {
                for a in 0..dout {
                    let wrow = &wv[(((i * no + j) * dout) + a) * din..][..din];
                    let mut acc = 0.0;
                    for b in 0..din {
                        acc += wrow[b] * u[b];
                    }
                    value[(i * no + j) * dout + a] = acc;
                }
            }
        }
        let needs = self.needs(weights) || self.needs(input);
        self.push(
            vec![ni, no, dout],
            value,
            Op::CapsPredict {
                weights: weights.0,
                input: input.0,
                ni,
                no,
                dout,
                din,
            },
            needs,
        )
    }

    /// Coupled sum `s[j] = sum_i c[i,j] * u_hat[i,j]` with the couplings
    /// treated as constants (gradients do not flow into them).
    pub fn coupled_sum(&mut self, preds: Var, couplings: &[f64]) -> Result<Var> {
        let sp = &self.nodes[preds.0].shape;
        if sp.len() != 3 {
            return Err(Error::dim("coupled_sum", format!("predictions {:?}", sp)));
        }
        let (ni, no, dout) = (sp[0], sp[1], sp[2]);
        if couplings.len() != ni * no {
            return Err(Error::dim(
                "coupled_sum",
                format!("{} couplings for {}x{} pairs", couplings.len(), ni, no),
            ));
        }
        if !couplings.iter().all(|c| c.is_finite() && *c >= 0.0) {
            return Err(Error::contract(
                "coupled_sum: couplings must be finite and non-negative",
            ));
        }
        let pv = &self.nodes[preds.0].value;
        let mut value = vec![0.0; no * dout];
        for i in 0..ni {
            for j in 0..no {
                let c = couplings[i * no + j];
                let row = &pv[(i * no + j) * dout..][..dout];
                let out = &mut value[j * dout..(j + 1) * dout];
                for a in 0..dout {
                    out[a] += c * row[a];
                }
            }
        }
        let needs = self.needs(preds);
        self.push(
            vec![no, dout],
            value,
            Op::CoupledSum {
                preds: preds.0,
                couplings: couplings.to_vec(),
                ni,
                no,
                dout,
            },
            needs,
        )
    }

    /// Stack rank-1 vars of equal length into a `[k, len]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("stack_rows: no rows given"));
        }
        let cols = {
            let s = &self.nodes[parts[0].0].shape;
            if s.len() != 1 {
                return Err(Error::dim("stack_rows", format!("row 0 has shape {:?}", s)));
            }
            s[0]
        };
        let mut value = Vec::with_capacity(parts.len() * cols);
        let mut needs = false;
        for (idx, p) in parts.iter().enumerate() {
            let s = &self.nodes[p.0].shape;
            if s.len() != 1 || s[0] != cols {
                return Err(Error::dim(
                    "stack_rows",
                    format!("row {} has shape {:?}, expected [{}]", idx, s, cols),
                ));
            }
            value.extend_from_slice(&self.nodes[p.0].value);
            needs |= self.needs(*p);
        }
        let shape = vec![parts.len(), cols];
        self.push(
            shape,
            value,
            Op::StackRows {
                parts: parts.iter().map(|p| p.0).collect(),
                cols,
            },
            needs,
        )
    }

    /// Columnwise maximum of `[rows,cols]`, as `[cols]`. Ties resolve to the
    /// lowest row index.
    pub fn col_max(&mut self, x: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 2 || sx[0] == 0 {
            return Err(Error::dim("col_max", format!("input {:?}", sx)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![f64::NEG_INFINITY; cols];
        let mut argrow = vec![0usize; cols];
        for r in 0..rows {
            for c in 0..cols {
                if xv[r * cols + c] > value[c] {
                    value[c] = xv[r * cols + c];
                    argrow[c] = r;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            vec![cols],
            value,
            Op::ColMax {
                x: x.0,
                cols,
                argrow,
            },
            needs,
        )
    }

    /// Extract element `index` of a rank-1 var as a `[1]` scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 1 || index >= sx[0] {
            return Err(Error::dim(
                "pick",
                format!("index {} in shape {:?}", index, sx),
            ));
        }
        let value = vec![self.nodes[x.0].value[index]];
        let needs = self.needs(x);
        self.push(vec![1], value, Op::Pick { x: x.0, index }, needs)
    }

    /// Reinterpret the shape; element count must be unchanged.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::dim(
                "reshape",
                format!(
                    "{:?} -> {:?} changes element count",
                    self.nodes[x.0].shape, shape
                ),
            ));
        }
        let value = self.nodes[x.0].value.clone();
        let needs = self.needs(x);
        self.push(shape, value, Op::Reshape { x: x.0 }, needs)
    }

    /// Reverse sweep from `loss` (which must be scalar). Gradients sum at
    /// fan-out. The record is consumed; values and gradients remain
    /// readable through the returned pass.
    pub fn backward(self, loss: Var) -> Result<BackwardPass> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            ensure_finite(&g, &format!("backward of {}", nodes[i].op.name()))?;
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(BackwardPass { nodes, grads })
    }
}

/// Result of a completed reverse sweep: node values plus accumulated
/// gradients for every node on a differentiated path.
#[derive(Debug)]
pub struct BackwardPass {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl BackwardPass {
    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Tensor snapshot of a node with its gradient attached (if any).
    pub fn grad_tensor(&self, v: Var) -> Result<Tensor> {
        let mut t = Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())?;
        t.set_grad(self.grads[v.0].clone())?;
        Ok(t)
    }
}

fn conv2d_forward(input: &[f64], kernels: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.co * d.ho * d.wo];
    for o in 0..d.co {
        for i in 0..d.ci {
            for r in 0..d.kh {
                for q in 0..d.kw {
                    let wgt = kernels[((o * d.ci + i) * d.kh + r) * d.kw + q];
                    for y in 0..d.ho {
                        let iy = (y * d.stride + r) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let (x0, x1) = conv_x_range(d, q);
                        if x0 >= x1 {
                            continue;
                        }
                        let in_row = &input[(i * d.h + iy as usize) * d.w..][..d.w];
                        let out_row = &mut out[(o * d.ho + y) * d.wo..][..d.wo];
                        for x in x0..x1 {
                            let ix = x * d.stride + q - d.padding;
                            out_row[x] += wgt * in_row[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output-x interval for which `x*stride + q - padding` lands inside `[0, w)`.
fn conv_x_range(d: &ConvDims, q: usize) -> (usize, usize) {
    let x0 = if d.padding > q {
        (d.padding - q).div_ceil(d.stride)
    } else {
        0
    };
    let x1 = if d.w + d.padding > q {
        ((d.w - 1 + d.padding - q) / d.stride + 1).min(d.wo)
    } else {
        0
    };
    (x0.min(d.wo), x1)
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    idx: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].needs {
        return None;
    }
    let slot = &mut grads[idx];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[idx].value.len()]);
    }
    slot.as_mut()
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += s;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs {
                let bv = &nodes[*b].value;
                let ga = grad_buf(grads, nodes, *a).unwrap();
                for k in 0..g.len() {
                    ga[k] += g[k] * bv[k];
                }
            }
            if nodes[*b].needs {
                let av = &nodes[*a].value;
                let gb = grad_buf(grads, nodes, *b).unwrap();
                for k in 0..g.len() {
                    gb[k] += g[k] * av[k];
                }
            }
        }
        Op::Div(a, b) => {
            if nodes[*a].needs {
                let bv = &nodes[*b].value;
                let ga = grad_buf(grads, nodes, *a).unwrap();
                for k in 0..g.len() {
                    ga[k] += g[k] / bv[k];
                }
            }
            if nodes[*b].needs {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let gb = grad_buf(grads, nodes, *b).unwrap();
                for k in 0..g.len() {
                    gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                }
            }
        }
        Op::Affine { x, mul } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for k in 0..g.len() {
                    gx[k] += mul * g[k];
                }
            }
        }
        Op::Relu(x) => {
            if nodes[*x].needs {
                let xv = &nodes[*x].value;
                let gx = grad_buf(grads, nodes, *x).unwrap();
                for k in 0..g.len() {
                    if xv[k] > 0.0 {
                        gx[k] += g[k];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if nodes[*x].needs {
                let yv = &nodes[i].value;
                let gx = grad_buf(grads, nodes, *x).unwrap();
                for k in 0..g.len() {
                    gx[k] += g[k] * yv[k] * (1.0 - yv[k]);
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, kk, n) = (*m, *k, *n);
            if nodes[*a].needs {
                let bv = &nodes[*b].value;
                let ga = grad_buf(grads, nodes, *a).unwrap();
                // dA = dC . B^T
                for i2 in 0..m {
                    for j in 0..n {
                        let gij = g[i2 * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..kk {
                            ga[i2 * kk + p] += gij * bv[p * n + j];
                        }
                    }
                }
            }
            if nodes[*b].needs {
                let av = &nodes[*a].value;
                let gb = grad_buf(grads, nodes, *b).unwrap();
                // dB = A^T . dC
                for i2 in 0..m {
                    for p in 0..kk {
                        let aip = av[i2 * kk + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += aip * g[i2 * n + j];
                        }
                    }
                }
            }
        }
        Op::BiasRow { x, bias, rows, cols } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *bias) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        gb[c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::BiasChannel { x, bias, c, hw } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *bias) {
                for ch in 0..*c {
                    gb[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                }
            }
        }
        Op::Conv2d {
            input,
            kernels,
            dims,
        } => {
            if nodes[*input].needs {
                let kv = &nodes[*kernels].value;
                let gi = grad_buf(grads, nodes, *input).unwrap();
                conv2d_backward_input(gi, kv, g, dims);
            }
            if nodes[*kernels].needs {
                let iv = &nodes[*input].value;
                let gk = grad_buf(grads, nodes, *kernels).unwrap();
                conv2d_backward_kernels(gk, iv, g, dims);
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if let Some(gi) = grad_buf(grads, nodes, *input) {
                for (o, &src) in argmax.iter().enumerate() {
                    gi[src] += g[o];
                }
            }
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            rows,
            cols,
            mean,
            inv_std,
        } => {
            let (rows, cols) = (*rows, *cols);
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            let xhat = |r: usize, c: usize| (xv[r * cols + c] - mean[c]) * inv_std[c];
            if let Some(gb) = grad_buf(grads, nodes, *beta) {
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
            }
            if let Some(gg) = grad_buf(grads, nodes, *gamma) {
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] += g[r * cols + c] * xhat(r, c);
                    }
                }
            }
            if nodes[*x].needs {
                let mut mean_g = vec![0.0; cols];
                let mut mean_gx = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        mean_g[c] += g[r * cols + c];
                        mean_gx[c] += g[r * cols + c] * xhat(r, c);
                    }
                }
                for c in 0..cols {
                    mean_g[c] /= rows as f64;
                    mean_gx[c] /= rows as f64;
                }
                let gx = grad_buf(grads, nodes, *x).unwrap();
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += gv[c]
                            * inv_std[c]
                            * (g[r * cols + c] - mean_g[c] - xhat(r, c) * mean_gx[c]);
                    }
                }
            }
        }
        Op::BatchNormInfer {
            x,
            gamma,
            beta,
            rows,
            cols,
            mean,
            inv_std,
        } => {
            let (rows, cols) = (*rows, *cols);
            let xv = &nodes[*x].value;
            let gv = &nodes[*gamma].value;
            if let Some(gb) = grad_buf(grads, nodes, *beta) {
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
            }
            if let Some(gg) = grad_buf(grads, nodes, *gamma) {
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] += g[r * cols + c] * (xv[r * cols + c] - mean[c]) * inv_std[c];
                    }
                }
            }
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[r * cols + c] * gv[c] * inv_std[c];
                    }
                }
            }
        }
        Op::SoftmaxAxis {
            x,
            outer,
            axis_len,
            inner,
        } => {
            if nodes[*x].needs {
                let yv = &nodes[i].value;
                let gx = grad_buf(grads, nodes, *x).unwrap();
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let at = |l: usize| (o * axis_len + l) * inner + ii;
                        let mut dot = 0.0;
                        for l in 0..*axis_len {
                            dot += g[at(l)] * yv[at(l)];
                        }
                        for l in 0..*axis_len {
                            gx[at(l)] += yv[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            targets,
            probs,
            rows,
            cols,
        } => {
            if let Some(gl) = grad_buf(grads, nodes, *logits) {
                let scale = g[0] / *rows as f64;
                for r in 0..*rows {
                    for c in 0..*cols {
                        let ind = if targets[r] == c { 1.0 } else { 0.0 };
                        gl[r * cols + c] += scale * (probs[r * cols + c] - ind);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::NormRows { x, rows, cols } => {
            if nodes[*x].needs {
                let xv = &nodes[*x].value;
                let nv = &nodes[i].value;
                let gx = grad_buf(grads, nodes, *x).unwrap();
                for r in 0..*rows {
                    let n = nv[r];
                    if n > 0.0 {
                        let s = g[r] / n;
                        for c in 0..*cols {
                            gx[r * cols + c] += s * xv[r * cols + c];
                        }
                    }
                }
            }
        }
        Op::SquashRows { x, rows, cols } => {
            if nodes[*x].needs {
                let xv = &nodes[*x].value;
                let gx = grad_buf(grads, nodes, *x).unwrap();
                for r in 0..*rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let n2 = row.iter().map(|v| v * v).sum::<f64>();
                    let n = n2.sqrt();
                    if n == 0.0 {
                        // Jacobian of squash vanishes at the origin
                        continue;
                    }
                    let f = n / (1.0 + n2);
                    let fp = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
                    let gdotu = row
                        .iter()
                        .zip(grow)
                        .map(|(s, gg)| s / n * gg)
                        .sum::<f64>();
                    for c in 0..*cols {
                        gx[r * cols + c] += f * grow[c] + fp * gdotu * row[c];
                    }
                }
            }
        }
        Op::ChwToNf { x, c, hw } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for ch in 0..*c {
                    for p in 0..*hw {
                        gx[ch * hw + p] += g[p * c + ch];
                    }
                }
            }
        }
        Op::NfToChw { x, c, hw } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for ch in 0..*c {
                    for p in 0..*hw {
                        gx[p * c + ch] += g[ch * hw + p];
                    }
                }
            }
        }
        Op::ConcatChannels { a, b, ca, cb, hw } => {
            let split = ca * hw;
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for (d, s) in ga.iter_mut().zip(&g[..split]) {
                    *d += s;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *b) {
                for (d, s) in gb.iter_mut().zip(&g[split..split + cb * hw]) {
                    *d += s;
                }
            }
        }
        Op::PrimaryGroup { x, groups, dim, hw } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for gr in 0..*groups {
                    for p in 0..*hw {
                        for e in 0..*dim {
                            gx[(gr * dim + e) * hw + p] += g[(gr * hw + p) * dim + e];
                        }
                    }
                }
            }
        }
        Op::CapsPredict {
            weights,
            input,
            ni,
            no,
            dout,
            din,
        } => {
            if nodes[*weights].needs {
                let uv = &nodes[*input].value;
                let gw = grad_buf(grads, nodes, *weights).unwrap();
                for i2 in 0..*ni {
                    let u = &uv[i2 * din..(i2 + 1) * din];
                    for j in 0..*no {
                        for a in 0..*dout {
                            let gp = g[(i2 * no + j) * dout + a];
                            if gp == 0.0 {
                                continue;
                            }
                            let wrow = &mut gw[(((i2 * no + j) * dout) + a) * din..][..*din];
                            for b in 0..*din {
                                wrow[b] += gp * u[b];
                            }
                        }
                    }
                }
            }
            if nodes[*input].needs {
                let wv = &nodes[*weights].value;
                let gu = grad_buf(grads, nodes, *input).unwrap();
                for i2 in 0..*ni {
                    for j in 0..*no {
                        for a in 0..*dout {
                            let gp = g[(i2 * no + j) * dout + a];
                            if gp == 0.0 {
                                continue;
                            }
                            let wrow = &wv[(((i2 * no + j) * dout) + a) * din..][..*din];
                            for b in 0..*din {
                                gu[i2 * din + b] += gp * wrow[b];
                            }
                        }
                    }
                }
            }
        }
        Op::CoupledSum {
            preds,
            couplings,
            ni,
            no,
            dout,
        } => {
            if let Some(gp) = grad_buf(grads, nodes, *preds) {
                for i2 in 0..*ni {
                    for j in 0..*no {
                        let c = couplings[i2 * no + j];
                        let dst = &mut gp[(i2 * no + j) * dout..][..*dout];
                        let src = &g[j * dout..(j + 1) * dout];
                        for a in 0..*dout {
                            dst[a] += c * src[a];
                        }
                    }
                }
            }
        }
        Op::StackRows { parts, cols } => {
            for (r, &p) in parts.iter().enumerate() {
                if let Some(gp) = grad_buf(grads, nodes, p) {
                    for (d, s) in gp.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d += s;
                    }
                }
            }
        }
        Op::ColMax { x, cols, argrow } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for c in 0..*cols {
                    gx[argrow[c] * cols + c] += g[c];
                }
            }
        }
        Op::Pick { x, index } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                gx[*index] += g[0];
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

fn conv2d_backward_input(gi: &mut [f64], kernels: &[f64], gout: &[f64], d: &ConvDims) {
    for o in 0..d.co {
        for i in 0..d.ci {
            for r in 0..d.kh {
                for q in 0..d.kw {
                    let wgt = kernels[((o * d.ci + i) * d.kh + r) * d.kw + q];
                    if wgt == 0.0 {
                        continue;
                    }
                    for y in 0..d.ho {
                        let iy = (y * d.stride + r) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let (x0, x1) = conv_x_range(d, q);
                        if x0 >= x1 {
                            continue;
                        }
                        let gout_row = &gout[(o * d.ho + y) * d.wo..][..d.wo];
                        let gi_row = &mut gi[(i * d.h + iy as usize) * d.w..][..d.w];
                        for x in x0..x1 {
                            gi_row[x * d.stride + q - d.padding] += wgt * gout_row[x];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernels(gk: &mut [f64], input: &[f64], gout: &[f64], d: &ConvDims) {
    for o in 0..d.co {
        for i in 0..d.ci {
            for r in 0..d.kh {
                for q in 0..d.kw {
                    let mut acc = 0.0;
                    for y in 0..d.ho {
                        let iy = (y * d.stride + r) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let (x0, x1) = conv_x_range(d, q);
                        if x0 >= x1 {
                            continue;
                        }
                        let gout_row = &gout[(o * d.ho + y) * d.wo..][..d.wo];
                        let in_row = &input[(i * d.h + iy as usize) * d.w..][..d.w];
                        for x in x0..x1 {
                            acc += gout_row[x] * in_row[x * d.stride + q - d.padding];
                        }
                    }
                    gk[((o * d.ci + i) * d.kh + r) * d.kw + q] += acc;
                }
            }
        }
    }
}
