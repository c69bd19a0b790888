//! The computation tape and the differentiable operations recorded on it.
//!
//! Every operation appends one node holding its forward value and the inputs
//! its backward rule needs. Nodes are only ever appended, so the node order is
//! a valid topological order and [`Tape::backward`] is a single reverse sweep.

use super::tensor::{numel, rows_cols, Tensor};
use crate::error::{Error, Result};

/// Probability floor applied before taking logarithms in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    DivScalar {
        a: Var,
        divisor: f64,
    },
    AddBias {
        x: Var,
        bias: Var,
        cols: usize,
    },
    Gelu {
        x: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        t_out: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    SoftmaxEntropy {
        x: Var,
        cols: usize,
        probs: Vec<f64>,
    },
    SoftmaxNll {
        x: Var,
        cols: usize,
        probs: Vec<f64>,
        targets: Vec<usize>,
        clamped: Vec<bool>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
        cols: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        total: usize,
    },
    Sum {
        x: Var,
    },
    DotConst {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations. Leaf gradients accumulate across
/// [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// Numerically stable softmax of one row, with entries at positions
/// `>= allowed` forced to zero.
pub(crate) fn softmax_row(row: &[f64], allowed: usize, out: &mut [f64]) {
    let live = &row[..allowed];
    let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out[..allowed].iter_mut().zip(live) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in &mut out[..allowed] {
        *o /= sum;
    }
    for o in &mut out[allowed..] {
        *o = 0.0;
    }
}

/// Shannon entropy of a probability row with `0 log 0 = 0`.
pub(crate) fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum::<f64>()
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a tensor as a leaf; it is tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("constant", &shape, &[data.len()]));
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node out as an untracked tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.value.clone(), n.shape.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                for (o, &bpj) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, vec![cols, rows], rg, Op::Transpose { a, rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, shape, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, rg, Op::Scale { a, factor })
    }

    /// `a / divisor`, computed as a true division (not multiplication by the reciprocal).
    pub fn div_scalar(&mut self, a: Var, divisor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x / divisor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(out, shape, rg, Op::DivScalar { a, divisor })
    }

    /// Row-wise bias add: `x[.., j] + bias[j]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % cols])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, shape, rg, Op::AddBias { x, bias, cols }))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(out, shape, rg, Op::Gelu { x })
    }

    /// Valid (unpadded) strided cross-correlation over time plus bias.
    ///
    /// `x: [T x C_in]`, `w: [K x C_in x C_out]`, `bias: [C_out]`.
    pub fn conv1d_strided(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Contract("conv1d stride must be >= 1".into()));
        }
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || sb != [sw[2]] {
            return Err(Error::shape("conv1d_strided", sx, sw));
        }
        let (t_in, c_in) = (sx[0], sx[1]);
        let (kernel, c_out) = (sw[0], sw[2]);
        if t_in < kernel {
            return Err(Error::InputTooShort {
                op: "conv1d_strided",
                needed: kernel,
                got: t_in,
            });
        }
        let t_out = (t_in - kernel) / stride + 1;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let row = &mut out[t * c_out..(t + 1) * c_out];
            row.copy_from_slice(bv);
            for k in 0..kernel {
                let xrow = &xv[(t * stride + k) * c_in..(t * stride + k + 1) * c_in];
                for (c, &xval) in xrow.iter().enumerate() {
                    let wrow = &wv[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                    for (o, &wval) in row.iter_mut().zip(wrow) {
                        *o += xval * wval;
                    }
                }
            }
        }
        let rg = self.rg(&[x, w, bias]);
        Ok(self.push(
            out,
            vec![t_out, c_out],
            rg,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                kernel,
                c_in,
                c_out,
                t_out,
            },
        ))
    }

    /// Per-row normalization over the last dimension followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be > 0".into()));
        }
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax over the last dimension, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only sees columns `j <= i + (cols - rows)`.
    pub fn softmax_causal(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if cols == 0 {
            return Err(Error::shape("softmax", self.shape(x), &[]));
        }
        if causal && rows > cols {
            return Err(Error::shape("softmax_causal", self.shape(x), &[]));
        }
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let allowed = if causal { r + 1 + (cols - rows) } else { cols };
            softmax_row(
                &xv[r * cols..(r + 1) * cols],
                allowed,
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(out, shape, rg, Op::Softmax { x, cols }))
    }

    /// Per-row entropy `H(softmax(x))`, differentiated through the logits `x`.
    /// Output shape is `[rows]`.
    pub fn softmax_entropy(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_entropy"));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let p = &mut probs[r * cols..(r + 1) * cols];
            softmax_row(&xv[r * cols..(r + 1) * cols], cols, p);
            out[r] = row_entropy(p);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![rows], rg, Op::SoftmaxEntropy { x, cols, probs }))
    }

    /// Per-row cross-entropy `-log max(softmax(x)[target], 1e-12)`. Output shape `[rows]`.
    pub fn softmax_nll(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if targets.len() != rows {
            return Err(Error::shape("softmax_nll", self.shape(x), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: cols,
            });
        }
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_nll"));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows];
        let mut clamped = vec![false; rows];
        for r in 0..rows {
            let p = &mut probs[r * cols..(r + 1) * cols];
            softmax_row(&xv[r * cols..(r + 1) * cols], cols, p);
            let pt = p[targets[r]];
            clamped[r] = pt < PROB_FLOOR;
            out[r] = -pt.max(PROB_FLOOR).ln();
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            vec![rows],
            rg,
            Op::SoftmaxNll {
                x,
                cols,
                probs,
                targets: targets.to_vec(),
                clamped,
            },
        ))
    }

    /// Embedding lookup: rows `idx` of a `[V x d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", s, &[]));
        }
        let (size, cols) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= size) {
            return Err(Error::IndexOutOfRange { index: bad, size });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            vec![idx.len(), cols],
            rg,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
                cols,
            },
        ))
    }

    /// Stacks 2-D tensors with equal widths along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            vec![rows, cols],
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::shape("slice_rows", s, &[start, len]));
        }
        let cols = s[1];
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(out, vec![len, cols], rg, Op::SliceRows { x, start, cols }))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::shape("slice_cols", s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            vec![rows, len],
            rg,
            Op::SliceCols {
                x,
                start,
                len,
                cols,
            },
        ))
    }

    /// Joins 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(*first).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), s));
            }
            widths.push((p, s[1]));
        }
        let total: usize = widths.iter().map(|(_, w)| w).sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &(p, w) in &widths {
            let pv = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            vec![rows, total],
            rg,
            Op::ConcatCols {
                parts: widths,
                total,
            },
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![s], vec![], rg, Op::Sum { x })
    }

    /// `sum_i weights[i] * x[i]` with constant weights, accumulated left to right.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("dot_const", self.shape(x), &[weights.len()]));
        }
        let mut s = 0.0;
        for (w, v) in weights.iter().zip(self.value(x)) {
            s += w * v;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![s],
            vec![],
            rg,
            Op::DotConst {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    // ----------------------------------------------------------- backward

    /// Propagates `d loss / d leaf` into every tracked leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = self.node(loss);
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.shape.clone()));
        }
        if !loss_node.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let nodes = &self.nodes;
            let tracked = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| nodes[v.0].value.as_slice();
            let len = |v: Var| nodes[v.0].value.len();

            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, d) in slot.iter_mut().zip(&g) {
                        *s += d;
                    }
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if tracked(a) {
                        let bv = val(b);
                        let da = acc(&mut adj, a, m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    if tracked(b) {
                        let av = val(a);
                        let db = acc(&mut adj, b, k * n);
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                &Op::Transpose { a, rows, cols } => {
                    let da = acc(&mut adj, a, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
                &Op::Add { a, b } => {
                    for v in [a, b] {
                        if tracked(v) {
                            let d = acc(&mut adj, v, g.len());
                            for (x, y) in d.iter_mut().zip(&g) {
                                *x += y;
                            }
                        }
                    }
                }
                &Op::Mul { a, b } => {
                    if tracked(a) {
                        let bv = val(b);
                        let d = acc(&mut adj, a, g.len());
                        for j in 0..g.len() {
                            d[j] += g[j] * bv[j];
                        }
                    }
                    if tracked(b) {
                        let av = val(a);
                        let d = acc(&mut adj, b, g.len());
                        for j in 0..g.len() {
                            d[j] += g[j] * av[j];
                        }
                    }
                }
                &Op::Scale { a, factor } => {
                    let d = acc(&mut adj, a, g.len());
                    for (x, y) in d.iter_mut().zip(&g) {
                        *x += y * factor;
                    }
                }
                &Op::DivScalar { a, divisor } => {
                    let d = acc(&mut adj, a, g.len());
                    for (x, y) in d.iter_mut().zip(&g) {
                        *x += y / divisor;
                    }
                }
                &Op::AddBias { x, bias, cols } => {
                    if tracked(x) {
                        let d = acc(&mut adj, x, g.len());
                        for (a, b) in d.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    if tracked(bias) {
                        let d = acc(&mut adj, bias, cols);
                        for (j, gv) in g.iter().enumerate() {
                            d[j % cols] += gv;
                        }
                    }
                }
                &Op::Gelu { x } => {
                    let xv = val(x);
                    let d = acc(&mut adj, x, g.len());
                    for j in 0..g.len() {
                        d[j] += g[j] * gelu_parts(xv[j]).1;
                    }
                }
                &Op::Conv1d {
                    x,
                    w,
                    bias,
                    stride,
                    kernel,
                    c_in,
                    c_out,
                    t_out,
                } => {
                    if tracked(bias) {
                        let d = acc(&mut adj, bias, c_out);
                        for t in 0..t_out {
                            for o in 0..c_out {
                                d[o] += g[t * c_out + o];
                            }
                        }
                    }
                    if tracked(w) {
                        let xv = val(x);
                        let d = acc(&mut adj, w, kernel * c_in * c_out);
                        for t in 0..t_out {
                            let grow = &g[t * c_out..(t + 1) * c_out];
                            for k in 0..kernel {
                                for c in 0..c_in {
                                    let xval = xv[(t * stride + k) * c_in + c];
                                    let drow =
                                        &mut d[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                    for (dw, &gv) in drow.iter_mut().zip(grow) {
                                        *dw += xval * gv;
                                    }
                                }
                            }
                        }
                    }
                    if tracked(x) {
                        let wv = val(w);
                        let d = acc(&mut adj, x, len(x));
                        for t in 0..t_out {
                            let grow = &g[t * c_out..(t + 1) * c_out];
                            for k in 0..kernel {
                                for c in 0..c_in {
                                    let wrow =
                                        &wv[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                    let s: f64 = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                                    d[(t * stride + k) * c_in + c] += s;
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cols,
                    xhat,
                    rstd,
                } => {
                    let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
                    let rows = rstd.len();
                    if tracked(gamma) {
                        let d = acc(&mut adj, gamma, cols);
                        for r in 0..rows {
                            for j in 0..cols {
                                d[j] += g[r * cols + j] * xhat[r * cols + j];
                            }
                        }
                    }
                    if tracked(beta) {
                        let d = acc(&mut adj, beta, cols);
                        for r in 0..rows {
                            for j in 0..cols {
                                d[j] += g[r * cols + j];
                            }
                        }
                    }
                    if tracked(x) {
                        let gv = val(gamma);
                        let d = acc(&mut adj, x, rows * cols);
                        for r in 0..rows {
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for j in 0..cols {
                                let gg = g[r * cols + j] * gv[j];
                                mean_g += gg;
                                mean_gx += gg * xhat[r * cols + j];
                            }
                            mean_g /= cols as f64;
                            mean_gx /= cols as f64;
                            for j in 0..cols {
                                let gg = g[r * cols + j] * gv[j];
                                d[r * cols + j] +=
                                    rstd[r] * (gg - mean_g - xhat[r * cols + j] * mean_gx);
                            }
                        }
                    }
                }
                &Op::Softmax { x, cols } => {
                    let p = node.value.as_slice();
                    let d = acc(&mut adj, x, g.len());
                    for r in 0..g.len() / cols {
                        let range = r * cols..(r + 1) * cols;
                        let dot: f64 = g[range.clone()]
                            .iter()
                            .zip(&p[range.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in range {
                            d[j] += p[j] * (g[j] - dot);
                        }
                    }
                }
                Op::SoftmaxEntropy { x, cols, probs } => {
                    let (x, cols) = (*x, *cols);
                    let h = node.value.as_slice();
                    let d = acc(&mut adj, x, probs.len());
                    for r in 0..h.len() {
                        for j in r * cols..(r + 1) * cols {
                            let p = probs[j];
                            if p > 0.0 {
                                d[j] += -g[r] * p * (p.ln() + h[r]);
                            }
                        }
                    }
                }
                Op::SoftmaxNll {
                    x,
                    cols,
                    probs,
                    targets,
                    clamped,
                } => {
                    let (x, cols) = (*x, *cols);
                    let d = acc(&mut adj, x, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        if clamped[r] {
                            continue;
                        }
                        for j in 0..cols {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * cols + j] += g[r] * (probs[r * cols + j] - onehot);
                        }
                    }
                }
                Op::GatherRows { table, idx, cols } => {
                    let (table, cols) = (*table, *cols);
                    let d = acc(&mut adj, table, len(table));
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            d[i * cols + j] += g[r * cols + j];
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = len(p);
                        if tracked(p) {
                            let d = acc(&mut adj, p, n);
                            for (a, b) in d.iter_mut().zip(&g[offset..offset + n]) {
                                *a += b;
                            }
                        }
                        offset += n;
                    }
                }
                &Op::SliceRows { x, start, cols } => {
                    let d = acc(&mut adj, x, len(x));
                    for (a, b) in d[start * cols..start * cols + g.len()].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                &Op::SliceCols {
                    x,
                    start,
                    len: w,
                    cols,
                } => {
                    let rows = g.len() / w.max(1);
                    let d = acc(&mut adj, x, rows * cols);
                    for r in 0..rows {
                        for j in 0..w {
                            d[r * cols + start + j] += g[r * w + j];
                        }
                    }
                }
                Op::ConcatCols { parts, total } => {
                    let total = *total;
                    let rows = g.len() / total.max(1);
                    let mut offset = 0;
                    for &(p, w) in parts {
                        if tracked(p) {
                            let d = acc(&mut adj, p, rows * w);
                            for r in 0..rows {
                                for j in 0..w {
                                    d[r * w + j] += g[r * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                &Op::Sum { x } => {
                    let d = acc(&mut adj, x, len(x));
                    for a in d.iter_mut() {
                        *a += g[0];
                    }
                }
                Op::DotConst { x, weights } => {
                    let d = acc(&mut adj, *x, weights.len());
                    for (a, w) in d.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t2(tape: &mut Tape, data: &[f64], r: usize, c: usize, grad: bool) -> Var {
        tape.leaf(
            &Tensor::new(data.to_vec(), vec![r, c])
                .unwrap()
                .with_grad(grad),
        )
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let eye = t2(&mut tape, &[1.0, 0.0, 0.0, 1.0], 2, 2, false);
        let m = t2(&mut tape, &[1.0, 2.0, 3.0, 4.0], 2, 2, false);
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let a = t2(&mut tape, &[1.0, 2.0], 1, 2, false);
        let b = t2(&mut tape, &[3.0, 4.0], 2, 1, false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
        assert_eq!(tape.shape(c), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = t2(&mut tape, &[0.0; 6], 2, 3, false);
        let b = t2(&mut tape, &[0.0; 4], 2, 2, false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_wrt_left() {
        // d/dA sum(A B) = 1 * B^T: every row of dA is the row sums of B.
        let mut tape = Tape::new();
        let a = t2(&mut tape, &[1.0, 0.0, 0.0, 1.0], 2, 2, true);
        let b = t2(&mut tape, &[2.0, 3.0, 4.0, 5.0], 2, 2, false);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 9.0, 5.0, 9.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn conv1d_window_sum_and_difference() {
        let mut tape = Tape::new();
        let x = t2(&mut tape, &[1.0; 4], 4, 1, false);
        let w = tape.leaf(&Tensor::new(vec![1.0, 1.0], vec![2, 1, 1]).unwrap());
        let b = tape.leaf(&Tensor::zeros(&[1]));
        let y = tape.conv1d_strided(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y), &[2.0, 2.0]);

        let x = t2(&mut tape, &[1.0, 2.0, 3.0, 4.0, 5.0], 5, 1, false);
        let w = tape.leaf(&Tensor::new(vec![1.0, -1.0], vec![2, 1, 1]).unwrap());
        let y = tape.conv1d_strided(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y), &[-1.0, -1.0, -1.0, -1.0]);
        assert_eq!(tape.shape(y), &[4, 1]);
    }

    #[test]
    fn conv1d_rejects_short_input() {
        let mut tape = Tape::new();
        let x = t2(&mut tape, &[1.0; 2], 2, 1, false);
        let w = tape.leaf(&Tensor::zeros(&[3, 1, 1]));
        let b = tape.leaf(&Tensor::zeros(&[1]));
        assert!(matches!(
            tape.conv1d_strided(x, w, b, 1),
            Err(Error::InputTooShort {
                needed: 3,
                got: 2,
                ..
            })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 1.0, 1.0]));
        let g = tape.leaf(&Tensor::ones(&[3]));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

        let x = tape.leaf(&Tensor::from_vec(vec![0.0, 2.0]));
        let g = tape.leaf(&Tensor::ones(&[2]));
        let b = tape.leaf(&Tensor::full(&[2], 3.0));
        let y = tape.layer_norm(x, g, b, 1e-15).unwrap();
        assert_abs_diff_eq!(tape.value(y)[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(y)[1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::zeros(&[4]));
        let p = tape.softmax(z).unwrap();
        assert_eq!(tape.value(p), &[0.25; 4]);

        let z = tape.leaf(&Tensor::from_vec(vec![2f64.ln(), 0.0]));
        let p = tape.softmax(z).unwrap();
        assert_abs_diff_eq!(tape.value(p)[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(p)[1], 1.0 / 3.0, epsilon = 1e-15);

        let z = tape.leaf(&Tensor::from_vec(vec![1000.0, 0.0]));
        let p = tape.softmax(z).unwrap();
        assert_eq!(tape.value(p), &[1.0, 0.0]);

        let z = tape.leaf(&Tensor::from_vec(vec![f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let z = t2(&mut tape, &[0.0; 9], 3, 3, false);
        let p = tape.softmax_causal(z).unwrap();
        let v = tape.value(p);
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert_abs_diff_eq!(v[8], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[3]).with_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        // accumulates until zeroed
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[3]).with_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nll_clamps_tiny_probabilities() {
        let mut tape = Tape::new();
        // p(target) = e^-40 / (1 + e^-40) < 1e-12
        let z = tape.leaf(&Tensor::from_vec(vec![0.0, -40.0]).with_grad(true));
        let ce = tape.softmax_nll(z, &[1]).unwrap();
        assert_abs_diff_eq!(tape.value(ce)[0], -(1e-12f64).ln(), epsilon = 1e-12);
        let s = tape.sum(ce);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.0, 0.0]);
    }
}
