//! Feed-forward networks with hand-written backpropagation.
//!
//! Layers: affine, ReLU, PReLU (one learned slope per layer), and 1-d
//! batch normalization with running statistics (frozen at predict time).
//! Topologies are either a plain stack or two parallel branches over
//! disjoint column sets whose outputs concatenate into a head stack; the
//! branch shape exists for models that process signal-quality features
//! separately from the per-channel airtime vector.
//!
//! Losses: MSE, RMSE, and the masked RMSE that scores per-STA errors
//! together with per-AP errors computed by summing the member STAs'
//! predictions.
//!
//! Everything is deterministic under the spec seed: weight init and the
//! per-epoch batch shuffle derive from it, and training is single
//! threaded.

use crate::features::FeatureTable;
use crate::rng::{rng_for, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use std::collections::BTreeMap;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network specification: {0}")]
    InvalidSpec(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("{0}")]
    Mismatch(String),
}

/// Row-major dense matrix; small and unapologetically simple.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            debug_assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Column subset, in the order given.
    pub fn select_cols(&self, cols: &[usize]) -> Mat {
        let mut out = Mat::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (k, &c) in cols.iter().enumerate() {
                *out.at_mut(r, k) = self.at(r, c);
            }
        }
        out
    }

    pub fn hcat(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.rows, self.cols + other.cols);
        for r in 0..self.rows {
            out.data[r * out.cols..r * out.cols + self.cols].copy_from_slice(self.row(r));
            out.data[r * out.cols + self.cols..(r + 1) * out.cols].copy_from_slice(other.row(r));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear {
        in_dim: usize,
        out_dim: usize,
        /// `out_dim x in_dim`, row-major.
        w: Vec<f64>,
        b: Vec<f64>,
    },
    ReLU,
    PReLU {
        slope: f64,
    },
    BatchNorm {
        dim: usize,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        momentum: f64,
        eps: f64,
    },
}

pub enum LayerCache {
    Linear { input: Mat },
    Activation { input: Mat },
    BatchNorm { centered: Mat, inv_std: Vec<f64>, xhat: Mat },
    None,
}

impl Layer {
    fn out_width(&self, in_width: usize) -> usize {
        match self {
            Layer::Linear { out_dim, .. } => *out_dim,
            _ => in_width,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Linear { w, b, .. } => w.len() + b.len(),
            Layer::ReLU => 0,
            Layer::PReLU { .. } => 1,
            Layer::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
        }
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        match self {
            Layer::Linear { w, b, .. } => {
                out.extend_from_slice(w);
                out.extend_from_slice(b);
            }
            Layer::ReLU => {}
            Layer::PReLU { slope } => out.push(*slope),
            Layer::BatchNorm { gamma, beta, .. } => {
                out.extend_from_slice(gamma);
                out.extend_from_slice(beta);
            }
        }
    }

    fn load_params(&mut self, src: &[f64], offset: &mut usize) {
        match self {
            Layer::Linear { w, b, .. } => {
                w.copy_from_slice(&src[*offset..*offset + w.len()]);
                *offset += w.len();
                b.copy_from_slice(&src[*offset..*offset + b.len()]);
                *offset += b.len();
            }
            Layer::ReLU => {}
            Layer::PReLU { slope } => {
                *slope = src[*offset];
                *offset += 1;
            }
            Layer::BatchNorm { gamma, beta, .. } => {
                gamma.copy_from_slice(&src[*offset..*offset + gamma.len()]);
                *offset += gamma.len();
                beta.copy_from_slice(&src[*offset..*offset + beta.len()]);
                *offset += beta.len();
            }
        }
    }

    fn forward(&mut self, x: &Mat, training: bool) -> (Mat, LayerCache) {
        match self {
            Layer::Linear { in_dim, out_dim, w, b } => {
                debug_assert_eq!(x.cols, *in_dim);
                let mut out = Mat::zeros(x.rows, *out_dim);
                for r in 0..x.rows {
                    let xr = x.row(r);
                    for o in 0..*out_dim {
                        let wr = &w[o * *in_dim..(o + 1) * *in_dim];
                        let mut acc = b[o];
                        for (xi, wi) in xr.iter().zip(wr) {
                            acc += xi * wi;
                        }
                        *out.at_mut(r, o) = acc;
                    }
                }
                (out, LayerCache::Linear { input: x.clone() })
            }
            Layer::ReLU => {
                let mut out = x.clone();
                for v in &mut out.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                (out, LayerCache::Activation { input: x.clone() })
            }
            Layer::PReLU { slope } => {
                let mut out = x.clone();
                for v in &mut out.data {
                    if *v < 0.0 {
                        *v *= *slope;
                    }
                }
                (out, LayerCache::Activation { input: x.clone() })
            }
            Layer::BatchNorm {
                dim,
                gamma,
                beta,
                running_mean,
                running_var,
                momentum,
                eps,
            } => {
                debug_assert_eq!(x.cols, *dim);
                let n = x.rows as f64;
                let (mean, var): (Vec<f64>, Vec<f64>) = if training {
                    let mean: Vec<f64> = (0..*dim)
                        .map(|c| (0..x.rows).map(|r| x.at(r, c)).sum::<f64>() / n)
                        .collect();
                    let var: Vec<f64> = (0..*dim)
                        .map(|c| {
                            (0..x.rows).map(|r| (x.at(r, c) - mean[c]).powi(2)).sum::<f64>() / n
                        })
                        .collect();
                    for c in 0..*dim {
                        running_mean[c] = *momentum * running_mean[c] + (1.0 - *momentum) * mean[c];
                        running_var[c] = *momentum * running_var[c] + (1.0 - *momentum) * var[c];
                    }
                    (mean, var)
                } else {
                    (running_mean.clone(), running_var.clone())
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + *eps).sqrt()).collect();
                let mut centered = x.clone();
                for r in 0..x.rows {
                    for c in 0..*dim {
                        *centered.at_mut(r, c) -= mean[c];
                    }
                }
                let mut xhat = centered.clone();
                for r in 0..x.rows {
                    for c in 0..*dim {
                        *xhat.at_mut(r, c) *= inv_std[c];
                    }
                }
                let mut out = xhat.clone();
                for r in 0..x.rows {
                    for c in 0..*dim {
                        *out.at_mut(r, c) = gamma[c] * out.at(r, c) + beta[c];
                    }
                }
                (
                    out,
                    LayerCache::BatchNorm {
                        centered,
                        inv_std,
                        xhat,
                    },
                )
            }
        }
    }

    /// Returns the gradient w.r.t. the layer input and this layer's
    /// parameter gradients (same order as [`push_params`](Self::push_params)).
    fn backward(&self, cache: &LayerCache, grad_out: &Mat) -> (Mat, Vec<f64>) {
        match (self, cache) {
            (Layer::Linear { in_dim, out_dim, w, .. }, LayerCache::Linear { input }) => {
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; *out_dim];
                let mut dx = Mat::zeros(input.rows, *in_dim);
                for r in 0..input.rows {
                    let xr = input.row(r);
                    for o in 0..*out_dim {
                        let g = grad_out.at(r, o);
                        db[o] += g;
                        let wr = &w[o * *in_dim..(o + 1) * *in_dim];
                        for i in 0..*in_dim {
                            dw[o * *in_dim + i] += g * xr[i];
                            *dx.at_mut(r, i) += g * wr[i];
                        }
                    }
                }
                let mut grads = dw;
                grads.extend(db);
                (dx, grads)
            }
            (Layer::ReLU, LayerCache::Activation { input }) => {
                let mut dx = grad_out.clone();
                for (g, x) in dx.data.iter_mut().zip(&input.data) {
                    if *x <= 0.0 {
                        *g = 0.0;
                    }
                }
                (dx, Vec::new())
            }
            (Layer::PReLU { slope }, LayerCache::Activation { input }) => {
                let mut dx = grad_out.clone();
                let mut dslope = 0.0;
                for (g, x) in dx.data.iter_mut().zip(&input.data) {
                    if *x <= 0.0 {
                        dslope += *g * x;
                        *g *= *slope;
                    }
                }
                (dx, vec![dslope])
            }
            (
                Layer::BatchNorm { dim, gamma, .. },
                LayerCache::BatchNorm {
                    centered,
                    inv_std,
                    xhat,
                },
            ) => {
                let n = grad_out.rows as f64;
                let mut dgamma = vec![0.0; *dim];
                let mut dbeta = vec![0.0; *dim];
                for r in 0..grad_out.rows {
                    for c in 0..*dim {
                        let g = grad_out.at(r, c);
                        dgamma[c] += g * xhat.at(r, c);
                        dbeta[c] += g;
                    }
                }
                let mut dx = Mat::zeros(grad_out.rows, *dim);
                for c in 0..*dim {
                    // dxhat = g * gamma; classic batch-norm backward over
                    // the batch mean and variance.
                    let sum_dxhat: f64 =
                        (0..grad_out.rows).map(|r| grad_out.at(r, c) * gamma[c]).sum();
                    let sum_dxhat_xhat: f64 = (0..grad_out.rows)
                        .map(|r| grad_out.at(r, c) * gamma[c] * xhat.at(r, c))
                        .sum();
                    for r in 0..grad_out.rows {
                        let dxhat = grad_out.at(r, c) * gamma[c];
                        *dx.at_mut(r, c) = inv_std[c] / n
                            * (n * dxhat - sum_dxhat - xhat.at(r, c) * sum_dxhat_xhat);
                    }
                }
                let _ = centered;
                let mut grads = dgamma;
                grads.extend(dbeta);
                (dx, grads)
            }
            _ => unreachable!("cache kind does not match layer kind"),
        }
    }
}

// ---------------------------------------------------------------------------
// Stacks and networks
// ---------------------------------------------------------------------------

/// Descriptor used to build layers before widths are known.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Linear(usize),
    ReLU,
    PReLU,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    Stack(Vec<LayerSpec>),
    /// Branch `b` sees `b_cols`; branch `a` sees every other column; their
    /// outputs concatenate (a first) into the head.
    TwoBranch {
        b_cols: Range<usize>,
        a: Vec<LayerSpec>,
        b: Vec<LayerSpec>,
        head: Vec<LayerSpec>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn build(specs: &[LayerSpec], mut width: usize, rng: &mut Rng) -> Result<(Self, usize), NnError> {
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            let layer = match s {
                LayerSpec::Linear(out) => {
                    if *out == 0 {
                        return Err(NnError::InvalidSpec("zero-width linear layer".into()));
                    }
                    let bound = (6.0 / (width + out) as f64).sqrt();
                    let w: Vec<f64> =
                        (0..out * width).map(|_| rng.gen_range(-bound..bound)).collect();
                    let l = Layer::Linear {
                        in_dim: width,
                        out_dim: *out,
                        w,
                        b: vec![0.0; *out],
                    };
                    width = *out;
                    l
                }
                LayerSpec::ReLU => Layer::ReLU,
                LayerSpec::PReLU => Layer::PReLU { slope: 0.25 },
                LayerSpec::BatchNorm => Layer::BatchNorm {
                    dim: width,
                    gamma: vec![1.0; width],
                    beta: vec![0.0; width],
                    running_mean: vec![0.0; width],
                    running_var: vec![1.0; width],
                    momentum: 0.9,
                    eps: 1e-5,
                },
            };
            layers.push(layer);
        }
        Ok((Self { layers }, width))
    }

    pub fn forward(&mut self, x: &Mat, training: bool) -> (Mat, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = layer.forward(&h, training);
            caches.push(cache);
            h = next;
        }
        (h, caches)
    }

    pub fn forward_eval(&self, x: &Mat) -> Mat {
        // Eval never mutates running stats; clone layers cheaply instead of
        // threading interior mutability through.
        let mut h = x.clone();
        for layer in &self.layers {
            let (next, _) = layer.clone().forward(&h, false);
            h = next;
        }
        h
    }

    /// Gradients returned per layer in forward order.
    pub fn backward(&self, caches: &[LayerCache], grad_out: &Mat) -> (Mat, Vec<Vec<f64>>) {
        let mut per_layer = vec![Vec::new(); self.layers.len()];
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gin, pgrads) = layer.backward(&caches[i], &g);
            per_layer[i] = pgrads;
            g = gin;
        }
        (g, per_layer)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn push_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.push_params(out);
        }
    }

    pub fn load_params(&mut self, src: &[f64], offset: &mut usize) {
        for l in &mut self.layers {
            l.load_params(src, offset);
        }
    }

    /// Batch-norm running statistics (mean then var per layer); not
    /// trainable parameters but required for bit-exact model reload.
    pub fn push_running(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            if let Layer::BatchNorm { running_mean, running_var, .. } = l {
                out.extend_from_slice(running_mean);
                out.extend_from_slice(running_var);
            }
        }
    }

    pub fn load_running(&mut self, src: &[f64], offset: &mut usize) {
        for l in &mut self.layers {
            if let Layer::BatchNorm { running_mean, running_var, .. } = l {
                running_mean.copy_from_slice(&src[*offset..*offset + running_mean.len()]);
                *offset += running_mean.len();
                running_var.copy_from_slice(&src[*offset..*offset + running_var.len()]);
                *offset += running_var.len();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkShape {
    Stack(Stack),
    TwoBranch {
        b_cols: Range<usize>,
        a_cols: Vec<usize>,
        a: Stack,
        b: Stack,
        head: Stack,
    },
}

/// A built network: the trainable object behind the MLP model.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_width: usize,
    pub output_width: usize,
    pub shape: NetworkShape,
}

pub enum NetCache {
    Stack(Vec<LayerCache>),
    TwoBranch {
        a: Vec<LayerCache>,
        b: Vec<LayerCache>,
        head: Vec<LayerCache>,
        a_out_width: usize,
    },
}

impl Network {
    pub fn build(spec: &TopologySpec, input_width: usize, seed: u64) -> Result<Self, NnError> {
        let mut rng = rng_for(seed, 0xA11);
        match spec {
            TopologySpec::Stack(layers) => {
                let (stack, out) = Stack::build(layers, input_width, &mut rng)?;
                Ok(Self {
                    input_width,
                    output_width: out,
                    shape: NetworkShape::Stack(stack),
                })
            }
            TopologySpec::TwoBranch { b_cols, a, b, head } => {
                if b_cols.end > input_width || b_cols.is_empty() {
                    return Err(NnError::InvalidSpec(format!(
                        "branch columns {b_cols:?} outside input width {input_width}"
                    )));
                }
                let a_cols: Vec<usize> =
                    (0..input_width).filter(|c| !b_cols.contains(c)).collect();
                if a_cols.is_empty() {
                    return Err(NnError::InvalidSpec("branch A has no columns".into()));
                }
                let (sa, wa) = Stack::build(a, a_cols.len(), &mut rng)?;
                let (sb, wb) = Stack::build(b, b_cols.len(), &mut rng)?;
                let (sh, out) = Stack::build(head, wa + wb, &mut rng)?;
                Ok(Self {
                    input_width,
                    output_width: out,
                    shape: NetworkShape::TwoBranch {
                        b_cols: b_cols.clone(),
                        a_cols,
                        a: sa,
                        b: sb,
                        head: sh,
                    },
                })
            }
        }
    }

    pub fn forward(&mut self, x: &Mat, training: bool) -> (Mat, NetCache) {
        match &mut self.shape {
            NetworkShape::Stack(s) => {
                let (out, c) = s.forward(x, training);
                (out, NetCache::Stack(c))
            }
            NetworkShape::TwoBranch { b_cols, a_cols, a, b, head } => {
                let xa = x.select_cols(a_cols);
                let xb = x.select_cols(&b_cols.clone().collect::<Vec<_>>());
                let (ya, ca) = a.forward(&xa, training);
                let (yb, cb) = b.forward(&xb, training);
                let h = ya.hcat(&yb);
                let a_out_width = ya.cols;
                let (out, ch) = head.forward(&h, training);
                (
                    out,
                    NetCache::TwoBranch {
                        a: ca,
                        b: cb,
                        head: ch,
                        a_out_width,
                    },
                )
            }
        }
    }

    pub fn forward_eval(&self, x: &Mat) -> Mat {
        match &self.shape {
            NetworkShape::Stack(s) => s.forward_eval(x),
            NetworkShape::TwoBranch { b_cols, a_cols, a, b, head } => {
                let xa = x.select_cols(a_cols);
                let xb = x.select_cols(&b_cols.clone().collect::<Vec<_>>());
                let h = a.forward_eval(&xa).hcat(&b.forward_eval(&xb));
                head.forward_eval(&h)
            }
        }
    }

    /// Parameter gradients in [`params`](Self::params) order.
    pub fn backward(&self, cache: &NetCache, grad_out: &Mat) -> Vec<f64> {
        match (&self.shape, cache) {
            (NetworkShape::Stack(s), NetCache::Stack(c)) => {
                let (_, per_layer) = s.backward(c, grad_out);
                per_layer.concat()
            }
            (
                NetworkShape::TwoBranch { a, b, head, .. },
                NetCache::TwoBranch {
                    a: ca,
                    b: cb,
                    head: ch,
                    a_out_width,
                },
            ) => {
                let (dh, head_grads) = head.backward(ch, grad_out);
                let rows = dh.rows;
                let mut da = Mat::zeros(rows, *a_out_width);
                let mut db = Mat::zeros(rows, dh.cols - a_out_width);
                for r in 0..rows {
                    for c in 0..*a_out_width {
                        *da.at_mut(r, c) = dh.at(r, c);
                    }
                    for c in *a_out_width..dh.cols {
                        *db.at_mut(r, c - a_out_width) = dh.at(r, c);
                    }
                }
                let (_, a_grads) = a.backward(ca, &da);
                let (_, b_grads) = b.backward(cb, &db);
                let mut out = a_grads.concat();
                out.extend(b_grads.concat());
                out.extend(head_grads.concat());
                out
            }
            _ => unreachable!("cache shape does not match network shape"),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.shape {
            NetworkShape::Stack(s) => s.push_params(&mut out),
            NetworkShape::TwoBranch { a, b, head, .. } => {
                a.push_params(&mut out);
                b.push_params(&mut out);
                head.push_params(&mut out);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        match &mut self.shape {
            NetworkShape::Stack(s) => s.load_params(params, &mut offset),
            NetworkShape::TwoBranch { a, b, head, .. } => {
                a.load_params(params, &mut offset);
                b.load_params(params, &mut offset);
                head.load_params(params, &mut offset);
            }
        }
        debug_assert_eq!(offset, params.len());
    }

    pub fn param_count(&self) -> usize {
        match &self.shape {
            NetworkShape::Stack(s) => s.param_count(),
            NetworkShape::TwoBranch { a, b, head, .. } => {
                a.param_count() + b.param_count() + head.param_count()
            }
        }
    }

    pub fn running_stats(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.shape {
            NetworkShape::Stack(s) => s.push_running(&mut out),
            NetworkShape::TwoBranch { a, b, head, .. } => {
                a.push_running(&mut out);
                b.push_running(&mut out);
                head.push_running(&mut out);
            }
        }
        out
    }

    pub fn set_running_stats(&mut self, stats: &[f64]) {
        let mut offset = 0;
        match &mut self.shape {
            NetworkShape::Stack(s) => s.load_running(stats, &mut offset),
            NetworkShape::TwoBranch { a, b, head, .. } => {
                a.load_running(stats, &mut offset);
                b.load_running(stats, &mut offset);
                head.load_running(stats, &mut offset);
            }
        }
        debug_assert_eq!(offset, stats.len());
    }
}

// ---------------------------------------------------------------------------
// Losses and optimizers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Rmse,
    /// RMSE over per-STA errors concatenated with per-AP errors, the AP
    /// prediction being the sum of its members' predictions.
    MaskedRmse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Rmse => "rmse",
            LossKind::MaskedRmse => "masked_rmse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(LossKind::Mse),
            "rmse" => Some(LossKind::Rmse),
            "masked_rmse" => Some(LossKind::MaskedRmse),
            _ => None,
        }
    }
}

/// Group labels for the masked loss: `bss_of[i]` is the group of row `i`;
/// `ap_truth[g]` the group's aggregate label.
pub struct MaskedGroups<'a> {
    pub bss_of: &'a [usize],
    pub ap_truth: &'a [f64],
}

/// Loss value and gradient w.r.t. the prediction column.
pub fn loss_and_grad(
    kind: LossKind,
    preds: &Mat,
    truth: &[f64],
    groups: Option<&MaskedGroups<'_>>,
) -> Result<(f64, Mat), NnError> {
    if preds.cols != 1 || preds.rows != truth.len() || truth.is_empty() {
        return Err(NnError::Mismatch(format!(
            "loss needs an n x 1 prediction column matching {} labels",
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    match kind {
        LossKind::Mse => {
            let mut grad = Mat::zeros(preds.rows, 1);
            let mut sum = 0.0;
            for i in 0..preds.rows {
                let e = preds.at(i, 0) - truth[i];
                sum += e * e;
                *grad.at_mut(i, 0) = 2.0 * e / n;
            }
            Ok((sum / n, grad))
        }
        LossKind::Rmse => {
            let mut grad = Mat::zeros(preds.rows, 1);
            let mut sum = 0.0;
            for i in 0..preds.rows {
                let e = preds.at(i, 0) - truth[i];
                sum += e * e;
            }
            let rmse = (sum / n).sqrt();
            if rmse > 1e-12 {
                for i in 0..preds.rows {
                    let e = preds.at(i, 0) - truth[i];
                    *grad.at_mut(i, 0) = e / (n * rmse);
                }
            }
            Ok((rmse, grad))
        }
        LossKind::MaskedRmse => {
            let g = groups.ok_or_else(|| {
                NnError::Mismatch("masked loss needs BSS membership groups".into())
            })?;
            if g.bss_of.len() != truth.len() {
                return Err(NnError::Mismatch("membership does not cover all rows".into()));
            }
            let n_groups = g.ap_truth.len();
            let mut group_pred = vec![0.0; n_groups];
            for (i, &grp) in g.bss_of.iter().enumerate() {
                if grp >= n_groups {
                    return Err(NnError::Mismatch(format!("group index {grp} out of range")));
                }
                group_pred[grp] += preds.at(i, 0);
            }
            let total = (truth.len() + n_groups) as f64;
            let mut sum = 0.0;
            for i in 0..preds.rows {
                sum += (preds.at(i, 0) - truth[i]).powi(2);
            }
            for grp in 0..n_groups {
                sum += (group_pred[grp] - g.ap_truth[grp]).powi(2);
            }
            let rmse = (sum / total).sqrt();
            let mut grad = Mat::zeros(preds.rows, 1);
            if rmse > 1e-12 {
                for i in 0..preds.rows {
                    let e_sta = preds.at(i, 0) - truth[i];
                    let e_ap = group_pred[g.bss_of[i]] - g.ap_truth[g.bss_of[i]];
                    *grad.at_mut(i, 0) = (e_sta + e_ap) / (total * rmse);
                }
            }
            Ok((rmse, grad))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "rmsprop" => Some(OptimizerKind::RmsProp),
            _ => None,
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, param_count: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        const EPS: f64 = 1e-8;
        match self.kind {
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.t += 1;
                let bc1 = 1.0 - B1.powi(self.t as i32);
                let bc2 = 1.0 - B2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
                }
            }
            OptimizerKind::RmsProp => {
                const ALPHA: f64 = 0.99;
                for i in 0..params.len() {
                    self.v[i] = ALPHA * self.v[i] + (1.0 - ALPHA) * grads[i] * grads[i];
                    params[i] -= self.lr * grads[i] / (self.v[i].sqrt() + EPS);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// The MLP model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub topology: TopologySpec,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Rows per batch; for the masked loss this counts deployments so BSS
    /// groups never straddle a batch boundary.
    pub batch_size: usize,
    pub seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.learning_rate <= 0.0 {
            return Err(NnError::InvalidSpec("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NnError::InvalidSpec("epochs and batch size must be >= 1".into()));
        }
        let hidden = match &self.topology {
            TopologySpec::Stack(l) => l.iter().filter(|s| matches!(s, LayerSpec::Linear(_))).count(),
            TopologySpec::TwoBranch { a, b, head, .. } => a
                .iter()
                .chain(b)
                .chain(head)
                .filter(|s| matches!(s, LayerSpec::Linear(_)))
                .count(),
        };
        if hidden == 0 {
            return Err(NnError::InvalidSpec("need at least one linear layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub network: Network,
    pub loss: LossKind,
}

/// Batches for one epoch: plain row chunks, or whole-deployment chunks for
/// the masked loss.
fn epoch_batches(
    table: &FeatureTable,
    loss: LossKind,
    batch_size: usize,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    match loss {
        LossKind::Mse | LossKind::Rmse => {
            let mut idx: Vec<usize> = (0..table.len()).collect();
            idx.shuffle(rng);
            idx.chunks(batch_size).map(|c| c.to_vec()).collect()
        }
        LossKind::MaskedRmse => {
            let mut by_dep: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, id) in table.ids.iter().enumerate() {
                by_dep.entry(&id.deployment).or_default().push(i);
            }
            let mut deps: Vec<&str> = by_dep.keys().copied().collect();
            deps.shuffle(rng);
            deps.chunks(batch_size)
                .map(|chunk| chunk.iter().flat_map(|d| by_dep[d].clone()).collect())
                .collect()
        }
    }
}

/// Masked-loss groups for a batch of rows: groups are (deployment, bss)
/// pairs; the group truth is the sum of member labels, matching the
/// dataset's definition of the AP label.
fn batch_groups(table: &FeatureTable, batch: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let labels = table.labels.as_ref().expect("labels checked by caller");
    let mut group_of: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut bss_of = Vec::with_capacity(batch.len());
    let mut ap_truth = Vec::new();
    for &i in batch {
        let key = (table.ids[i].deployment.clone(), table.ids[i].bss.clone());
        let next = group_of.len();
        let g = *group_of.entry(key).or_insert(next);
        if g == ap_truth.len() {
            ap_truth.push(0.0);
        }
        bss_of.push(g);
        ap_truth[g] += labels[i];
    }
    (bss_of, ap_truth)
}

pub fn mlp_fit(spec: &MlpSpec, table: &FeatureTable) -> Result<MlpModel, NnError> {
    spec.validate()?;
    let labels = table
        .labels
        .as_ref()
        .ok_or_else(|| NnError::Mismatch("training table has no labels".into()))?;
    if table.is_empty() {
        return Err(NnError::Mismatch("training table is empty".into()));
    }
    let mut network = Network::build(&spec.topology, table.width(), spec.seed)?;
    if network.output_width != 1 {
        return Err(NnError::InvalidSpec(format!(
            "network must end in a single output, got {}",
            network.output_width
        )));
    }
    let mut params = network.params();
    let mut opt = Optimizer::new(spec.optimizer, spec.learning_rate, params.len());

    for epoch in 0..spec.epochs {
        let mut rng = rng_for(spec.seed, 1 + epoch as u64);
        let batches = epoch_batches(table, spec.loss, spec.batch_size, &mut rng);
        for batch in batches {
            let x = Mat::from_rows(
                &batch.iter().map(|&i| table.rows[i].clone()).collect::<Vec<_>>(),
            );
            let y: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
            let (out, cache) = network.forward(&x, true);
            let (loss, grad) = match spec.loss {
                LossKind::MaskedRmse => {
                    let (bss_of, ap_truth) = batch_groups(table, &batch);
                    loss_and_grad(
                        spec.loss,
                        &out,
                        &y,
                        Some(&MaskedGroups {
                            bss_of: &bss_of,
                            ap_truth: &ap_truth,
                        }),
                    )?
                }
                _ => loss_and_grad(spec.loss, &out, &y, None)?,
            };
            if !loss.is_finite() {
                return Err(NnError::Diverged { epoch, loss });
            }
            let grads = network.backward(&cache, &grad);
            opt.step(&mut params, &grads);
            network.set_params(&params);
        }
    }
    Ok(MlpModel {
        network,
        loss: spec.loss,
    })
}

pub fn mlp_predict(model: &MlpModel, rows: &[Vec<f64>]) -> Result<Vec<f64>, NnError> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    if rows[0].len() != model.network.input_width {
        return Err(NnError::Mismatch(format!(
            "query width {} does not match model input width {}",
            rows[0].len(),
            model.network.input_width
        )));
    }
    let x = Mat::from_rows(rows);
    let out = model.network.forward_eval(&x);
    Ok((0..out.rows).map(|r| out.at(r, 0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureBlock, FeatureSchema, Granularity, RowId};

    fn table_from(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> FeatureTable {
        let w = rows[0].len();
        FeatureTable {
            schema: FeatureSchema {
                granularity: Granularity::Sta,
                blocks: (0..w)
                    .map(|i| FeatureBlock::Numeric { name: format!("f{i}") })
                    .collect(),
            },
            ids: (0..rows.len())
                .map(|i| RowId {
                    deployment: format!("d-{:03}", i / 4),
                    bss: format!("BSS{:02}", i % 4),
                    node: format!("N{i}"),
                })
                .collect(),
            rows,
            labels: Some(labels),
        }
    }

    #[test]
    fn linear_mlp_recovers_the_least_squares_line() {
        // y = 2x + 1 exactly; the closed-form least-squares solution is
        // (w, b) = (2, 1), so trained weights must be within 1e-2 of it.
        let mut rng = crate::rng::rng_for(1, 1);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-2.0..2.0)]).collect();
        let labels: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] + 1.0).collect();
        let table = table_from(rows, labels);
        let spec = MlpSpec {
            topology: TopologySpec::Stack(vec![LayerSpec::Linear(1)]),
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.05,
            epochs: 400,
            batch_size: 200,
            seed: 7,
        };
        let model = mlp_fit(&spec, &table).unwrap();
        let p = model.network.params();
        assert!((p[0] - 2.0).abs() < 1e-2, "w = {}", p[0]);
        assert!((p[1] - 1.0).abs() < 1e-2, "b = {}", p[1]);
    }

    #[test]
    fn final_relu_keeps_predictions_non_negative() {
        let mut rng = crate::rng::rng_for(2, 2);
        let rows: Vec<Vec<f64>> = (0..64)
            .map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect();
        let labels: Vec<f64> = rows.iter().map(|r| r[0] - r[1]).collect();
        let table = table_from(rows, labels);
        let spec = MlpSpec {
            topology: TopologySpec::Stack(vec![
                LayerSpec::Linear(8),
                LayerSpec::ReLU,
                LayerSpec::Linear(1),
                LayerSpec::ReLU,
            ]),
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            epochs: 20,
            batch_size: 16,
            seed: 3,
        };
        let model = mlp_fit(&spec, &table).unwrap();
        let queries: Vec<Vec<f64>> = (0..128)
            .map(|_| vec![rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)])
            .collect();
        for p in mlp_predict(&model, &queries).unwrap() {
            assert!(p >= 0.0);
        }
    }

    /// Central finite differences over every parameter.
    fn check_gradients(network: &mut Network, x: &Mat, y: &[f64], loss: LossKind) -> f64 {
        let (out, cache) = network.forward(x, true);
        let (_, grad) = loss_and_grad(loss, &out, y, None).unwrap();
        let analytic = network.backward(&cache, &grad);
        let params = network.params();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            network.set_params(&plus);
            let (op, _) = network.forward(x, true);
            let (lp, _) = loss_and_grad(loss, &op, y, None).unwrap();
            let mut minus = params.clone();
            minus[i] -= h;
            network.set_params(&minus);
            let (om, _) = network.forward(x, true);
            let (lm, _) = loss_and_grad(loss, &om, y, None).unwrap();
            network.set_params(&params);
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic[i] - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences_across_all_layer_kinds() {
        let mut rng = crate::rng::rng_for(4, 4);
        let x = Mat::from_rows(
            &(0..10)
                .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>())
                .collect::<Vec<_>>(),
        );
        let y: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let spec = TopologySpec::Stack(vec![
            LayerSpec::Linear(7),
            LayerSpec::PReLU,
            LayerSpec::BatchNorm,
            LayerSpec::Linear(4),
            LayerSpec::ReLU,
            LayerSpec::Linear(1),
        ]);
        let mut network = Network::build(&spec, 5, 11).unwrap();
        for loss in [LossKind::Mse, LossKind::Rmse] {
            let rel = check_gradients(&mut network, &x, &y, loss);
            assert!(rel < 1e-3, "max relative error {rel} for {loss:?}");
        }
    }

    #[test]
    fn two_branch_gradients_match_finite_differences() {
        let mut rng = crate::rng::rng_for(5, 5);
        let x = Mat::from_rows(
            &(0..8)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
                .collect::<Vec<_>>(),
        );
        let y: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.0)).collect();
        let spec = TopologySpec::TwoBranch {
            b_cols: 4..6,
            a: vec![LayerSpec::Linear(5), LayerSpec::PReLU, LayerSpec::BatchNorm],
            b: vec![LayerSpec::Linear(3), LayerSpec::PReLU],
            head: vec![LayerSpec::Linear(1), LayerSpec::ReLU],
        };
        let mut network = Network::build(&spec, 6, 13).unwrap();
        let rel = check_gradients(&mut network, &x, &y, LossKind::Mse);
        assert!(rel < 1e-3, "max relative error {rel}");
    }

    #[test]
    fn prelu_with_zero_slope_equals_relu() {
        let mut prelu = Layer::PReLU { slope: 0.0 };
        let mut relu = Layer::ReLU;
        let x = Mat::from_rows(&[vec![-3.0, -0.5, 0.0, 0.5, 3.0]]);
        let (a, _) = prelu.forward(&x, true);
        let (b, _) = relu.forward(&x, true);
        assert_eq!(a, b);
    }

    #[test]
    fn masked_rmse_hand_case() {
        // one AP, STA preds {10, 10}, truth {12, 13}, AP truth 25:
        // errors {2, 3, 5} -> sqrt(38/3)
        let preds = Mat::from_rows(&[vec![10.0], vec![10.0]]);
        let truth = [12.0, 13.0];
        let groups = MaskedGroups {
            bss_of: &[0, 0],
            ap_truth: &[25.0],
        };
        let (loss, _) = loss_and_grad(LossKind::MaskedRmse, &preds, &truth, Some(&groups)).unwrap();
        assert!((loss - (38.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn masked_rmse_gradient_matches_finite_differences() {
        let mut rng = crate::rng::rng_for(6, 6);
        let n = 6;
        let preds_v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let bss_of = [0usize, 0, 1, 1, 1, 2];
        let ap_truth = [4.0, 7.0, 3.0];
        let groups = MaskedGroups { bss_of: &bss_of, ap_truth: &ap_truth };
        let preds = Mat::from_rows(&preds_v.iter().map(|&p| vec![p]).collect::<Vec<_>>());
        let (_, grad) =
            loss_and_grad(LossKind::MaskedRmse, &preds, &truth, Some(&groups)).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut up = preds.clone();
            *up.at_mut(i, 0) += h;
            let (lp, _) = loss_and_grad(LossKind::MaskedRmse, &up, &truth, Some(&groups)).unwrap();
            let mut dn = preds.clone();
            *dn.at_mut(i, 0) -= h;
            let (lm, _) = loss_and_grad(LossKind::MaskedRmse, &dn, &truth, Some(&groups)).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (grad.at(i, 0) - numeric).abs() < 1e-6,
                "row {i}: {} vs {numeric}",
                grad.at(i, 0)
            );
        }
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let mut rng = crate::rng::rng_for(8, 8);
        let rows: Vec<Vec<f64>> = (0..64)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let labels: Vec<f64> = rows.iter().map(|r| (r[0] * 3.0 - r[1]).max(0.0)).collect();
        let table = table_from(rows, labels);
        let spec = MlpSpec {
            topology: TopologySpec::Stack(vec![
                LayerSpec::Linear(8),
                LayerSpec::ReLU,
                LayerSpec::Linear(1),
            ]),
            loss: LossKind::Rmse,
            optimizer: OptimizerKind::RmsProp,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 16,
            seed: 99,
        };
        let a = mlp_fit(&spec, &table).unwrap();
        let b = mlp_fit(&spec, &table).unwrap();
        assert_eq!(a.network.params(), b.network.params());
    }
}
