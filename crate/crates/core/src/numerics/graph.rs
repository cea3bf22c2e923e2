//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. The tape is rebuilt for every forward pass.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Precomputed neighbourhood layout shared by the logits and apply ops.
///
/// Query `i` attends to keys `starts[i] .. starts[i] + width`; slot `s` of
/// query `i` reads relative-bias entry `bias_index[i * width + s]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighbourLayout {
    pub frames: usize,
    pub width: usize,
    pub starts: Vec<usize>,
    pub bias_index: Vec<usize>,
}

impl NeighbourLayout {
    pub fn neighbours(&self, i: usize) -> std::ops::Range<usize> {
        self.starts[i]..self.starts[i] + self.width
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax {
        input: Var,
        scale: f64,
    },
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        input: Var,
        index: Rc<Vec<Option<usize>>>,
    },
    NeighbourLogits {
        query: Var,
        key: Var,
        bias: Var,
        layout: Rc<NeighbourLayout>,
    },
    NeighbourApply {
        weights: Var,
        value: Var,
        layout: Rc<NeighbourLayout>,
    },
    DepthwiseConv {
        input: Var,
        kernel: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input; gradients are never propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A constant that still records its gradient (useful for Jacobian probes).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.value(id).clone();
        self.push(t, Op::Param(id), true)
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        Ok(self.param(store, id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_matrix("matmul", ta)?;
        check_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_matrix("matmul_t", ta)?;
        check_matrix("matmul_t", tb)?;
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_raw(ta.shape().to_vec(), out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Broadcast-add a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        check_matrix("add_row", ta)?;
        if tr.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % n])
            .collect();
        let t = Tensor::from_raw(ta.shape().to_vec(), out);
        let ng = self.ng(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    /// Broadcast-multiply every row by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        check_matrix("mul_row", ta)?;
        if tr.len() != ta.cols() {
            return Err(shape_err("mul_row", ta, tr));
        }
        let n = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tr.data()[i % n])
            .collect();
        let t = Tensor::from_raw(ta.shape().to_vec(), out);
        let ng = self.ng(&[a, row]);
        Ok(self.push(t, Op::MulRow(a, row), ng))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_raw(ta.shape().to_vec(), out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_raw(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * s).collect(),
        );
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_raw(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.max(0.0)).collect(),
        );
        let ng = self.ng(&[a]);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_raw(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.tanh()).collect(),
        );
        let ng = self.ng(&[a]);
        self.push(t, Op::Tanh(a), ng)
    }

    /// Row-wise softmax of `scale · a`, stabilised by the row maximum.
    ///
    /// `mask[i * cols + j] == false` excludes entry `j` from row `i`; excluded
    /// entries get exactly zero weight. A row with no admissible entry is an
    /// error.
    pub fn softmax_rows(&mut self, a: Var, scale: f64, mask: Option<&[bool]>) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::invalid("softmax scale must be positive"));
        }
        let ta = self.value(a);
        check_matrix("softmax_rows", ta)?;
        let (r, c) = (ta.rows(), ta.cols());
        if c == 0 {
            return Err(Error::invalid("softmax over empty rows"));
        }
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::invalid("softmax mask length mismatch"));
            }
        }
        let mut out = vec![0.0; r * c];
        softmax_rows_into(ta.data(), &mut out, r, c, scale, mask)?;
        let t = Tensor::from_raw(vec![r, c], out);
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Softmax { input: a, scale }, ng))
    }

    /// Per-row standardisation (no affine part): `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm_core(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid("layer norm eps must be positive"));
        }
        let ta = self.value(a);
        check_matrix("layer_norm", ta)?;
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = ta.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::from_raw(vec![r, c], out);
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::LayerNorm { input: a, inv_std }, ng))
    }

    /// Layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm_core(a, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        check_matrix("slice_cols", ta)?;
        if start + len > ta.cols() {
            return Err(Error::invalid(format!(
                "column slice {start}..{} out of {}",
                start + len,
                ta.cols()
            )));
        }
        let r = ta.rows();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ta.row(i)[start..start + len]);
        }
        let t = Tensor::from_raw(vec![r, len], out);
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::SliceCols { input: a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let r = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            check_matrix("concat_cols", t)?;
            if t.rows() != r {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let t = Tensor::from_raw(vec![r, total], out);
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Builds a new matrix whose row `i` is `a[index[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<Option<usize>>>) -> Result<Var> {
        let ta = self.value(a);
        check_matrix("gather_rows", ta)?;
        let c = ta.cols();
        let mut out = vec![0.0; index.len() * c];
        for (i, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                if s >= ta.rows() {
                    return Err(Error::invalid(format!("gather row {s} of {}", ta.rows())));
                }
                out[i * c..(i + 1) * c].copy_from_slice(ta.row(s));
            }
        }
        let t = Tensor::from_raw(vec![index.len(), c], out);
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::GatherRows { input: a, index }, ng))
    }

    /// Neighbourhood logits: `out[i, s] = q_i · k_{start_i + s} + bias[bias_index[i, s]]`.
    pub fn neighbour_logits(
        &mut self,
        query: Var,
        key: Var,
        bias: Var,
        layout: Rc<NeighbourLayout>,
    ) -> Result<Var> {
        let (tq, tk, tb) = (self.value(query), self.value(key), self.value(bias));
        if tq.shape() != tk.shape() || tq.rows() != layout.frames {
            return Err(shape_err("neighbour_logits", tq, tk));
        }
        if layout.bias_index.iter().any(|&b| b >= tb.len()) {
            return Err(Error::invalid("relative bias index out of table"));
        }
        let (t, w) = (layout.frames, layout.width);
        let mut out = vec![0.0; t * w];
        for i in 0..t {
            let q = tq.row(i);
            for (s, j) in layout.neighbours(i).enumerate() {
                let dot: f64 = q.iter().zip(tk.row(j)).map(|(a, b)| a * b).sum();
                out[i * w + s] = dot + tb.data()[layout.bias_index[i * w + s]];
            }
        }
        let ng = self.ng(&[query, key, bias]);
        Ok(self.push(
            Tensor::from_raw(vec![t, w], out),
            Op::NeighbourLogits {
                query,
                key,
                bias,
                layout,
            },
            ng,
        ))
    }

    /// `out_i = Σ_s weights[i, s] · value_{start_i + s}`.
    pub fn neighbour_apply(
        &mut self,
        weights: Var,
        value: Var,
        layout: Rc<NeighbourLayout>,
    ) -> Result<Var> {
        let (tw, tv) = (self.value(weights), self.value(value));
        if tw.rows() != layout.frames || tw.cols() != layout.width || tv.rows() != layout.frames {
            return Err(shape_err("neighbour_apply", tw, tv));
        }
        let (t, w, d) = (layout.frames, layout.width, tv.cols());
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let orow = &mut out[i * d..(i + 1) * d];
            for (s, j) in layout.neighbours(i).enumerate() {
                let a = tw.data()[i * w + s];
                for (o, v) in orow.iter_mut().zip(tv.row(j)) {
                    *o += a * v;
                }
            }
        }
        let ng = self.ng(&[weights, value]);
        Ok(self.push(
            Tensor::from_raw(vec![t, d], out),
            Op::NeighbourApply {
                weights,
                value,
                layout,
            },
            ng,
        ))
    }

    /// Depthwise 1-D convolution over rows (time) with zero "same" padding.
    /// `kernel` is k×c with odd k; tap `s` reads frame `t + s - (k-1)/2`.
    pub fn depthwise_conv(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(input), self.value(kernel));
        check_matrix("depthwise_conv", tx)?;
        check_matrix("depthwise_conv", tk)?;
        if tk.cols() != tx.cols() || tk.rows() % 2 == 0 {
            return Err(shape_err("depthwise_conv", tx, tk));
        }
        let (t, c, k) = (tx.rows(), tx.cols(), tk.rows());
        let half = (k - 1) / 2;
        let mut out = vec![0.0; t * c];
        for i in 0..t {
            for s in 0..k {
                let src = i as isize + s as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xr = tx.row(src as usize);
                let kr = tk.row(s);
                for ch in 0..c {
                    out[i * c + ch] += kr[ch] * xr[ch];
                }
            }
        }
        let ng = self.ng(&[input, kernel]);
        Ok(self.push(
            Tensor::from_raw(vec![t, c], out),
            Op::DepthwiseConv { input, kernel },
            ng,
        ))
    }

    /// Mean row-wise cross-entropy of `logits` against class `targets`; 1×1.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        check_matrix("cross_entropy", tl)?;
        let (r, c) = (tl.rows(), tl.cols());
        if targets.len() != r || r == 0 {
            return Err(Error::invalid(format!(
                "cross entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target class {bad} >= {c}")));
        }
        let mut probs = vec![0.0; r * c];
        softmax_rows_into(tl.data(), &mut probs, r, c, 1.0, None)?;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[i * c + t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / r as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross entropy".into()));
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::from_raw(vec![1, 1], vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::from_raw(vec![1, 1], vec![s]), Op::Sum(a), ng)
    }

    /// Backpropagates from a 1×1 node. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward from a non-scalar node"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf, summed when a parameter was loaded twice.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = match self.grads.get(i).and_then(|g| g.as_ref()) {
                    Some(g) => g.clone(),
                    None => vec![0.0; node.value.len()],
                };
                match out.iter_mut().find(|(pid, _)| *pid == id) {
                    Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => out.push((id, g)),
                }
            }
        }
        out
    }

    fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let ga = Self::acc(grads, *a, m * k);
                    matmul_bt_into(g, tb.data(), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = Self::acc(grads, *b, k * n);
                    matmul_at_into(ta.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ, a: m×k, b: n×k
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if needs(*a) {
                    let ga = Self::acc(grads, *a, m * k);
                    matmul_into(g, tb.data(), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = Self::acc(grads, *b, n * k);
                    matmul_at_into(g, ta.data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let gv = Self::acc(grads, v, g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    let ga = Self::acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if needs(*row) {
                    let n = len(*row);
                    let gr = Self::acc(grads, *row, n);
                    for (i, y) in g.iter().enumerate() {
                        gr[i % n] += y;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let n = tr.len();
                if needs(*a) {
                    let ga = Self::acc(grads, *a, g.len());
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * tr.data()[i % n];
                    }
                }
                if needs(*row) {
                    let gr = Self::acc(grads, *row, n);
                    for (i, y) in g.iter().enumerate() {
                        gr[i % n] += y * ta.data()[i];
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = Self::acc(grads, *a, g.len());
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * tb.data()[i];
                    }
                }
                if needs(*b) {
                    let gb = Self::acc(grads, *b, g.len());
                    for (i, y) in g.iter().enumerate() {
                        gb[i] += y * ta.data()[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    let ga = Self::acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let ta = self.value(*a);
                    let ga = Self::acc(grads, *a, g.len());
                    for (i, y) in g.iter().enumerate() {
                        if ta.data()[i] > 0.0 {
                            ga[i] += y;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let out = &node.value;
                    let ga = Self::acc(grads, *a, g.len());
                    for (i, y) in g.iter().enumerate() {
                        let t = out.data()[i];
                        ga[i] += y * (1.0 - t * t);
                    }
                }
            }
            Op::Softmax { input, scale } => {
                if needs(*input) {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    let ga = Self::acc(grads, *input, r * c);
                    for i in 0..r {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += scale * yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                if needs(*input) {
                    let xhat = &node.value;
                    let (r, c) = (xhat.rows(), xhat.cols());
                    let ga = Self::acc(grads, *input, r * c);
                    let n = c as f64;
                    for i in 0..r {
                        let xr = xhat.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] +=
                                inv_std[i] / n * (n * gr[j] - sum_g - xr[j] * sum_gx);
                        }
                    }
                }
            }
            Op::SliceCols { input, start } => {
                if needs(*input) {
                    let cols = self.value(*input).cols();
                    let w = node.value.cols();
                    let ga = Self::acc(grads, *input, len(*input));
                    for i in 0..node.value.rows() {
                        for j in 0..w {
                            ga[i * cols + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if needs(*p) {
                        let gp = Self::acc(grads, *p, len(*p));
                        for i in 0..node.value.rows() {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { input, index } => {
                if needs(*input) {
                    let c = node.value.cols();
                    let ga = Self::acc(grads, *input, len(*input));
                    for (i, src) in index.iter().enumerate() {
                        if let Some(s) = *src {
                            for j in 0..c {
                                ga[s * c + j] += g[i * c + j];
                            }
                        }
                    }
                }
            }
            Op::NeighbourLogits {
                query,
                key,
                bias,
                layout,
            } => {
                let (tq, tk) = (self.value(*query), self.value(*key));
                let (w, d) = (layout.width, tq.cols());
                if needs(*query) {
                    let gq = Self::acc(grads, *query, len(*query));
                    for i in 0..layout.frames {
                        for (s, j) in layout.neighbours(i).enumerate() {
                            let gl = g[i * w + s];
                            for (x, kv) in gq[i * d..(i + 1) * d].iter_mut().zip(tk.row(j)) {
                                *x += gl * kv;
                            }
                        }
                    }
                }
                if needs(*key) {
                    let gk = Self::acc(grads, *key, len(*key));
                    for i in 0..layout.frames {
                        for (s, j) in layout.neighbours(i).enumerate() {
                            let gl = g[i * w + s];
                            for (x, qv) in gk[j * d..(j + 1) * d].iter_mut().zip(tq.row(i)) {
                                *x += gl * qv;
                            }
                        }
                    }
                }
                if needs(*bias) {
                    let gb = Self::acc(grads, *bias, len(*bias));
                    for (p, &b) in layout.bias_index.iter().enumerate() {
                        gb[b] += g[p];
                    }
                }
            }
            Op::NeighbourApply {
                weights,
                value,
                layout,
            } => {
                let (tw, tv) = (self.value(*weights), self.value(*value));
                let (w, d) = (layout.width, tv.cols());
                if needs(*weights) {
                    let gw = Self::acc(grads, *weights, len(*weights));
                    for i in 0..layout.frames {
                        let gr = &g[i * d..(i + 1) * d];
                        for (s, j) in layout.neighbours(i).enumerate() {
                            gw[i * w + s] += gr.iter().zip(tv.row(j)).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if needs(*value) {
                    let gv = Self::acc(grads, *value, len(*value));
                    for i in 0..layout.frames {
                        let gr = &g[i * d..(i + 1) * d];
                        for (s, j) in layout.neighbours(i).enumerate() {
                            let a = tw.data()[i * w + s];
                            for (x, y) in gv[j * d..(j + 1) * d].iter_mut().zip(gr) {
                                *x += a * y;
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv { input, kernel } => {
                let (tx, tk) = (self.value(*input), self.value(*kernel));
                let (t, c, k) = (tx.rows(), tx.cols(), tk.rows());
                let half = (k - 1) / 2;
                let (nx, nk) = (needs(*input), needs(*kernel));
                let mut gx = if nx { vec![0.0; t * c] } else { Vec::new() };
                let mut gk = if nk { vec![0.0; k * c] } else { Vec::new() };
                for i in 0..t {
                    for s in 0..k {
                        let src = i as isize + s as isize - half as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            let go = g[i * c + ch];
                            if nx {
                                gx[src * c + ch] += go * tk.data()[s * c + ch];
                            }
                            if nk {
                                gk[s * c + ch] += go * tx.data()[src * c + ch];
                            }
                        }
                    }
                }
                if nx {
                    let a = Self::acc(grads, *input, t * c);
                    a.iter_mut().zip(&gx).for_each(|(x, y)| *x += y);
                }
                if nk {
                    let a = Self::acc(grads, *kernel, k * c);
                    a.iter_mut().zip(&gk).for_each(|(x, y)| *x += y);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let tl = self.value(*logits);
                    let (r, c) = (tl.rows(), tl.cols());
                    let scale = g[0] / r as f64;
                    let gl = Self::acc(grads, *logits, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let ga = Self::acc(grads, *a, len(*a));
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }
}

pub(crate) fn softmax_rows_into(
    input: &[f64],
    out: &mut [f64],
    rows: usize,
    cols: usize,
    scale: f64,
    mask: Option<&[bool]>,
) -> Result<()> {
    for i in 0..rows {
        let row = &input[i * cols..(i + 1) * cols];
        let allowed = |j: usize| mask.map_or(true, |m| m[i * cols + j]);
        let max = (0..cols)
            .filter(|&j| allowed(j))
            .map(|j| row[j] * scale)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::invalid(format!(
                "softmax row {i} has no admissible entries"
            )));
        }
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut total = 0.0;
        for j in 0..cols {
            if allowed(j) {
                let e = (row[j] * scale - max).exp();
                orow[j] = e;
                total += e;
            } else {
                orow[j] = 0.0;
            }
        }
        orow.iter_mut().for_each(|x| *x /= total);
    }
    Ok(())
}
