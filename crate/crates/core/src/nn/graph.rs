//! Taped reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Values are computed eagerly; [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every parameter leaf that the loss
//! depends on. Each graph is single-use: build one per forward pass.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::params::{Gradients, ParamStore};
use super::tensor::{sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A fixed linear combination of input rows: output row `r` is
/// `Σ w · x[i]` over `entries[r]`. Rows with no entries are zero.
///
/// Used for pooling, neighbourhood means, gathers, shifts and row masks,
/// none of which carry trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMixing {
    pub input_rows: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl RowMixing {
    pub fn output_rows(&self) -> usize {
        self.entries.len()
    }

    /// Diagonal mixing that scales each row independently.
    pub fn diagonal(weights: &[f64]) -> Self {
        RowMixing {
            input_rows: weights.len(),
            entries: weights.iter().enumerate().map(|(i, &w)| vec![(i, w)]).collect(),
        }
    }

    /// Gathers the given rows; `None` yields a zero row.
    pub fn gather(input_rows: usize, rows: &[Option<usize>]) -> Self {
        RowMixing {
            input_rows,
            entries: rows
                .iter()
                .map(|r| r.map(|i| vec![(i, 1.0)]).unwrap_or_default())
                .collect(),
        }
    }

    /// Shifts rows by `offset` (output row `r` reads input row `r + offset`),
    /// zero outside the valid range.
    pub fn shift(rows: usize, offset: isize) -> Self {
        RowMixing {
            input_rows: rows,
            entries: (0..rows)
                .map(|r| {
                    let src = r as isize + offset;
                    if src >= 0 && (src as usize) < rows {
                        vec![(src as usize, 1.0)]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.input_rows {
            return Err(Error::shape(
                "row_mix",
                format!("mixing expects {} rows, got {}", self.input_rows, x.rows()),
            ));
        }
        let c = x.cols();
        let mut out = vec![0.0; self.output_rows() * c];
        for (r, entries) in self.entries.iter().enumerate() {
            let o = &mut out[r * c..(r + 1) * c];
            for &(i, w) in entries {
                for (ov, &xv) in o.iter_mut().zip(x.row(i)) {
                    *ov += w * xv;
                }
            }
        }
        Tensor::matrix(self.output_rows(), c, out)
    }
}

enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    BroadcastCols(Var),
    RowMix(Var, Arc<RowMixing>),
    NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// Binds a named parameter from `store` as a leaf; repeated calls for
    /// the same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Param(name.to_string()), "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `x[r, :] + bias` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} values for {} columns", bv.len(), xv.cols()),
            ));
        }
        let mut out = xv.as_matrix();
        let c = out.cols();
        for r in 0..out.rows() {
            for (o, b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, bias), "add_row")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + k);
        self.push(out, Op::AddScalar(x), "add_scalar")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), "exp")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), "softplus")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input lies
    /// outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi), "clamp")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = super::tensor::softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x), "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", format!("row width {d}")));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), "transpose")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{} rows vs {} rows", av.rows(), bv.rows()),
            ));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.rows() * (ca + cb));
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let out = Tensor::matrix(av.rows(), ca + cb, out)?;
        self.push(out, Op::ConcatCols(a, b), "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} of {} columns", xv.cols()),
            ));
        }
        let mut out = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::matrix(xv.rows(), end - start, out)?;
        self.push(out, Op::SliceCols(x, start, end), "slice_cols")
    }

    /// Repeats a single-column matrix across `cols` columns.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(Error::shape("broadcast_cols", "input must have one column"));
        }
        let out: Vec<f64> = xv
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(cols))
            .collect();
        let out = Tensor::matrix(xv.rows(), cols, out)?;
        self.push(out, Op::BroadcastCols(x), "broadcast_cols")
    }

    pub fn row_mix(&mut self, x: Var, mixing: Arc<RowMixing>) -> Result<Var> {
        let out = mixing.apply(self.value(x))?;
        self.push(out, Op::RowMix(x, mixing), "row_mix")
    }

    /// Scales each row to unit Euclidean norm; all-zero rows stay zero
    /// and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).as_matrix();
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push(out, Op::NormalizeRows(x, norms), "normalize_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    /// Mean cross-entropy of row-wise softmax(logits) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits).as_matrix();
        check_labels("cross_entropy", lv.rows(), lv.cols(), labels)?;
        let probs = super::tensor::softmax_rows(&lv);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let n = labels.len().max(1) as f64;
        self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            "cross_entropy",
        )
    }

    /// Mean negative log-likelihood `−log p[r, y_r]` of given probabilities.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        check_labels("nll", pv.rows(), pv.cols(), labels)?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -pv.get(r, y).ln())
            .sum::<f64>()
            / labels.len().max(1) as f64;
        self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
            },
            "nll",
        )
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every
    /// parameter leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            let mut send = |v: Var, t: Tensor| accumulate(&mut grads, v, t);
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.insert(name.clone(), g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let gm = g.as_matrix();
                    send(*a, reshape_like(gm.matmul(&bv.transpose())?, av)?);
                    send(*b, reshape_like(av.as_matrix().transpose().matmul(&gm)?, bv)?);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv)?);
                    send(*b, g.zip_map(self.value(*a), |gv, av| gv * av)?);
                }
                Op::AddRow(x, bias) => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (s, v) in gb.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    let bshape = self.value(*bias).shape().to_vec();
                    send(*bias, Tensor::new(bshape, gb)?);
                    send(*x, reshape_like(g, self.value(*x))?);
                }
                Op::Scale(x, k) => send(*x, g.map(|v| v * k)),
                Op::AddScalar(x) => send(*x, g),
                Op::Tanh(x) => send(*x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))?),
                Op::Exp(x) => send(*x, g.zip_map(y, |gv, yv| gv * yv)?),
                Op::Sigmoid(x) => send(*x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))?),
                Op::Softplus(x) => {
                    send(*x, g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv))?)
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send(
                        *x,
                        g.zip_map(self.value(*x), |gv, xv| {
                            if xv < lo || xv > hi {
                                0.0
                            } else {
                                gv
                            }
                        })?,
                    )
                }
                Op::Softmax(x) => {
                    let c = y.cols();
                    let mut gx = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in gx.data_mut()[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(yr)
                            .zip(gr)
                        {
                            *o = yv * (gv - dot);
                        }
                    }
                    send(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = g.cols();
                    let gain_v = self.value(*gain).data();
                    let mut gx = vec![0.0; g.len()];
                    let mut g_gain = vec![0.0; d];
                    let mut g_bias = vec![0.0; d];
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let hr = &xhat[r * d..(r + 1) * d];
                        let gh: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghh =
                            gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                            g_gain[j] += gr[j] * hr[j];
                            g_bias[j] += gr[j];
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    send(*gain, Tensor::new(gs, g_gain)?);
                    send(*bias, Tensor::new(bs, g_bias)?);
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
                }
                Op::Transpose(x) => send(*x, reshape_like(g.transpose(), self.value(*x))?),
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let (mut ga, mut gb) = (Vec::new(), Vec::new());
                    for r in 0..g.rows() {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    send(*a, Tensor::new(self.value(*a).shape().to_vec(), ga)?);
                    send(*b, Tensor::new(self.value(*b).shape().to_vec(), gb)?);
                }
                Op::SliceCols(x, start, end) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    for r in 0..g.rows() {
                        gx[r * c + start..r * c + end].copy_from_slice(g.row(r));
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                Op::BroadcastCols(x) => {
                    let gx: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
                }
                Op::RowMix(x, mixing) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    for (r, entries) in mixing.entries.iter().enumerate() {
                        let gr = g.row(r);
                        for &(i, w) in entries {
                            for (o, gv) in gx[i * c..(i + 1) * c].iter_mut().zip(gr) {
                                *o += w * gv;
                            }
                        }
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                Op::NormalizeRows(x, norms) => {
                    let c = y.cols();
                    let mut gx = vec![0.0; y.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                    send(*x, Tensor::new(self.value(*x).shape().to_vec(), gx)?);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    send(*x, Tensor::filled(xv.shape(), g.item()));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let c = lv.cols();
                    let scale = g.item() / labels.len().max(1) as f64;
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &lab) in labels.iter().enumerate() {
                        gx[r * c + lab] -= scale;
                    }
                    send(*logits, Tensor::new(lv.shape().to_vec(), gx)?);
                }
                Op::Nll { probs, labels } => {
                    let pv = self.value(*probs);
                    let c = pv.cols();
                    let scale = g.item() / labels.len().max(1) as f64;
                    let mut gx = vec![0.0; pv.len()];
                    for (r, &lab) in labels.iter().enumerate() {
                        gx[r * c + lab] = -scale / pv.get(r, lab);
                    }
                    send(*probs, Tensor::new(pv.shape().to_vec(), gx)?);
                }
            }
        }
        for t in out.values() {
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients::from_map(out))
    }

    /// Runs [`Graph::backward`] and adds the result into `store`'s gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)
    }
}

fn check_labels(op: &'static str, rows: usize, cols: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(op, format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
        return Err(Error::InvalidArgument(format!(
            "{op}: label {bad} out of range for {cols} classes"
        )));
    }
    Ok(())
}

fn reshape_like(t: Tensor, like: &Tensor) -> Result<Tensor> {
    t.reshape(like.shape().to_vec())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_difference_check;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in entries {
            store.insert(name, t.clone()).unwrap();
        }
        store
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        // Small deterministic LCG so tests do not depend on an RNG crate.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let store = store_with(&[("p", Tensor::matrix(2, 3, pseudo(6, 1)).unwrap())]);
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("p").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_weighted_loss_has_zero_gradient() {
        let store = store_with(&[("p", Tensor::matrix(2, 2, pseudo(4, 2)).unwrap())]);
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let t = g.tanh(p).unwrap();
        let s = g.sum(t).unwrap();
        let loss = g.scale(s, 0.0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("p").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = store_with(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let loss = g.sum(p).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = store_with(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        assert!(matches!(g.backward(p), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let store = store_with(&[("p", Tensor::vector(vec![1000.0]))]);
        let mut g = Graph::new();
        let p = g.param(&store, "p").unwrap();
        assert!(matches!(g.exp(p), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, pseudo(6, 3)).unwrap()).unwrap();
        let w = g.constant(eye).unwrap();
        let b = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let xw = g.matmul(x, w).unwrap();
        let y = g.add_row(xw, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let z = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let b2 = g.constant(Tensor::vector(vec![0.5, -1.5])).unwrap();
        let zw = g.matmul(z, w).unwrap();
        let y2 = g.add_row(zw, b2).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(y2).row(r), &[0.5, -1.5]);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let bias = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let x = g.constant(Tensor::matrix(2, 2, vec![3.0, 3.0, -1.0, 1.0]).unwrap()).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.row(0), &[0.0, 0.0]);
        assert!((yv.get(1, 0) + 1.0).abs() < 1e-5 && (yv.get(1, 1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_statistics_and_shift_invariance() {
        let d = 7;
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[d], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[d])).unwrap();
        let raw = pseudo(d, 4).into_iter().map(|v| v * 5.0).collect::<Vec<_>>();
        let x = g.constant(Tensor::matrix(1, d, raw.clone()).unwrap()).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let yv = g.value(y).data().to_vec();
        let mean = yv.iter().sum::<f64>() / d as f64;
        let var = yv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);

        let shifted = g
            .constant(Tensor::matrix(1, d, raw.iter().map(|v| v + 42.0).collect()).unwrap())
            .unwrap();
        let y2 = g.layer_norm(shifted, gain, bias, 1e-5).unwrap();
        for (a, b) in yv.iter().zip(g.value(y2).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let store = store_with(&[
            ("a", Tensor::matrix(3, 4, pseudo(12, 5)).unwrap()),
            ("b", Tensor::matrix(4, 2, pseudo(8, 6)).unwrap()),
            ("c", Tensor::matrix(3, 4, pseudo(12, 7)).unwrap()),
            ("bias", Tensor::vector(pseudo(2, 8))),
            ("gain", Tensor::vector(pseudo(4, 9).iter().map(|v| 1.0 + v).collect())),
            ("beta", Tensor::vector(pseudo(4, 10))),
        ]);
        let mix = Arc::new(RowMixing {
            input_rows: 3,
            entries: vec![vec![(0, 0.5), (2, 0.5)], vec![], vec![(1, 2.0)]],
        });
        let weights = Tensor::matrix(3, 2, pseudo(6, 11)).unwrap();
        let report = finite_difference_check(
            &store,
            |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.param(s, "c")?;
                let bias = g.param(s, "bias")?;
                let gain = g.param(s, "gain")?;
                let beta = g.param(s, "beta")?;
                let ac = g.mul(a, c)?;
                let ln = g.layer_norm(ac, gain, beta, 1e-5)?;
                let t = g.tanh(ln)?;
                let sp = g.softplus(a)?;
                let sg = g.sigmoid(c)?;
                let mixed = g.sub(sp, sg)?;
                let s1 = g.add(t, mixed)?;
                let mm = g.matmul(s1, b)?;
                let lin = g.add_row(mm, bias)?;
                let sm = g.softmax(lin)?;
                let nrm = g.normalize_rows(lin)?;
                let cat = g.concat_cols(sm, nrm)?;
                let sl = g.slice_cols(cat, 1, 3)?;
                let rm = g.row_mix(sl, mix.clone())?;
                let tr = g.transpose(rm)?;
                let back = g.transpose(tr)?;
                let cl = g.clamp(back, -0.9, 0.9)?;
                let ex = g.exp(cl)?;
                let w = g.constant(weights.clone())?;
                let prod = g.mul(ex, w)?;
                let first = g.slice_cols(prod, 0, 1)?;
                let bc = g.broadcast_cols(first, 3)?;
                let bcs = g.sum(bc)?;
                let s = g.sum(prod)?;
                let ce = g.cross_entropy(lin, &[0, 1, 1])?;
                let nl = g.nll(sm, &[1, 0, 1])?;
                let a1 = g.add(s, ce)?;
                let a2 = g.add(a1, nl)?;
                let a3 = g.add(a2, bcs)?;
                g.add_scalar(a3, 0.25)
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn cross_entropy_matches_softmax_nll() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(2, 3, pseudo(6, 12)).unwrap()).unwrap();
        let ce = g.cross_entropy(l, &[2, 0]).unwrap();
        let p = g.softmax(l).unwrap();
        let nll = g.nll(p, &[2, 0]).unwrap();
        assert!((g.value(ce).item() - g.value(nll).item()).abs() < 1e-12);
        assert!(g.cross_entropy(l, &[3, 0]).is_err());
    }

    #[test]
    fn row_mixing_helpers() {
        let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(RowMixing::shift(3, 1).apply(&x).unwrap().data(), &[2.0, 3.0, 0.0]);
        assert_eq!(RowMixing::shift(3, -1).apply(&x).unwrap().data(), &[0.0, 1.0, 2.0]);
        assert_eq!(
            RowMixing::gather(3, &[Some(2), None]).apply(&x).unwrap().data(),
            &[3.0, 0.0]
        );
        assert_eq!(
            RowMixing::diagonal(&[0.0, 1.0, 2.0]).apply(&x).unwrap().data(),
            &[0.0, 2.0, 6.0]
        );
    }
}
