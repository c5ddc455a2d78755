//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its output value and the inputs it needs
//! for the backward rule. Nodes are appended in execution order, so the tape
//! is already topologically sorted and the backward pass is one reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensorcore::tensor::{matmul_raw, transpose_raw};
use crate::tensorcore::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    Index(Var, usize),
    MulScalarVar(Var, Var),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            MatMul(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | AddRow(a, b)
            | MulRow(a, b)
            | MulScalarVar(a, b) => vec![*a, *b],
            BroadcastRows(a)
            | Scale(a, _)
            | AddScalar(a)
            | Exp(a)
            | Ln(a)
            | Square(a)
            | Relu(a)
            | Sigmoid(a)
            | Softplus(a)
            | Gelu(a)
            | Softmax(a)
            | Sum(a)
            | Mean(a)
            | MeanCols(a)
            | SliceCols(a, _)
            | SliceRows(a, _)
            | Transpose(a)
            | GatherRows(a, _)
            | Index(a, _)
            | Reshape(a) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
    detached: Vec<Tensor>,
    replay: Option<std::vec::IntoIter<Tensor>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large x or underflow loss for small x
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn col_sums(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn expect_matrix(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericGuard(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf input. Gradients are kept for it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericGuard("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// A graph whose `detach` calls return `frozen` values, in order, instead
    /// of the live ones. Finite-difference checks use this to hold
    /// stop-gradient inputs at their base-point values.
    pub fn replaying(frozen: Vec<Tensor>) -> Self {
        Graph {
            replay: Some(frozen.into_iter()),
            ..Self::default()
        }
    }

    /// Copies the value of `x` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let live = self.value(x).clone();
        let v = match self.replay.as_mut().and_then(|it| it.next()) {
            Some(frozen) if frozen.shape() == live.shape() => frozen,
            Some(_) => {
                return Err(Error::Usage(
                    "replayed detach value has the wrong shape".into(),
                ))
            }
            None => live,
        };
        self.detached.push(v.clone());
        self.constant(v)
    }

    /// Values produced by `detach`, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = expect_matrix(self.value(a), "matmul")?;
        let (k2, m) = expect_matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions {k} and {k2} disagree"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::MatMul(a, b),
            "matmul",
        )
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn check_row(&self, x: Var, v: Var, name: &str) -> Result<(usize, usize)> {
        let (n, c) = expect_matrix(self.value(x), name)?;
        let tv = self.value(v);
        if tv.rank() != 1 || tv.shape()[0] != c {
            return Err(Error::dim(format!(
                "{name}: row operand {:?} does not match {c} columns",
                tv.shape()
            )));
        }
        Ok((n, c))
    }

    /// `x[i,j] + b[j]`
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.check_row(x, b, "add_row")?;
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bj) in data[r * c..(r + 1) * c].iter_mut().zip(bv) {
                *o += bj;
            }
        }
        self.push(
            Tensor::from_parts(vec![n, c], data),
            Op::AddRow(x, b),
            "add_row",
        )
    }

    /// `x[i,j] * v[j]`
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c) = self.check_row(x, v, "mul_row")?;
        let vv = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, vj) in data[r * c..(r + 1) * c].iter_mut().zip(vv) {
                *o *= vj;
            }
        }
        self.push(
            Tensor::from_parts(vec![n, c], data),
            Op::MulRow(x, v),
            "mul_row",
        )
    }

    /// Repeats vector `b` as `n` rows.
    pub fn broadcast_rows(&mut self, b: Var, n: usize) -> Result<Var> {
        let tb = self.value(b);
        if tb.rank() != 1 {
            return Err(Error::dim("broadcast_rows: expected a vector"));
        }
        let c = tb.shape()[0];
        let data = (0..n).flat_map(|_| tb.data().iter().copied()).collect();
        self.push(
            Tensor::from_parts(vec![n, c], data),
            Op::BroadcastRows(b),
            "broadcast_rows",
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), "add_scalar")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x), "exp")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Ln(x), "ln")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x), "square")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid_scalar);
        self.push(t, Op::Sigmoid(x), "sigmoid")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(softplus_scalar);
        self.push(t, Op::Softplus(x), "softplus")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu_scalar);
        self.push(t, Op::Gelu(x), "gelu")
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Row softmax of a square score matrix where row `i` only sees columns `<= i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = expect_matrix(self.value(x), "causal_softmax")?;
        if n != m {
            return Err(Error::dim("causal_softmax: score matrix must be square"));
        }
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            let row = &mut data[r * n..(r + 1) * n];
            softmax_in_place(&mut row[..=r]);
            row[r + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        // The backward rule of a plain softmax is exact here: masked outputs are 0.
        self.push(
            Tensor::from_parts(vec![n, n], data),
            Op::Softmax(x),
            "causal_softmax",
        )
    }

    /// Layer normalization over the last axis of a matrix.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.check_row(x, gain, "layer_norm")?;
        self.check_row(x, bias, "layer_norm")?;
        let tx = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &tx[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Mean next-token cross entropy over the rows of `logits`.
    ///
    /// `mask`, when given, selects the rows that count; at least one must.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (n, v) = expect_matrix(self.value(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {n} positions",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!(
                "target id {bad} outside vocabulary of {v}"
            )));
        }
        let weights: Vec<f64> = match mask {
            Some(m) if m.len() != n => {
                return Err(Error::dim("cross_entropy: mask length mismatch"));
            }
            Some(m) => m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; n],
        };
        let total_w: f64 = weights.iter().sum();
        if total_w == 0.0 {
            return Err(Error::Input(
                "cross_entropy: every position is masked".into(),
            ));
        }
        let data = self.value(logits).data();
        let mut probs = data.to_vec();
        let mut loss = 0.0;
        for r in 0..n {
            let row = &data[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
            softmax_in_place(&mut probs[r * v..(r + 1) * v]);
        }
        self.push(
            Tensor::scalar(loss / total_w),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.iter().map(|w| w / total_w).collect(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean over the last axis: `[n,c] -> [n]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let (n, c) = expect_matrix(self.value(x), "mean_cols")?;
        let d = self.value(x).data();
        let out = (0..n)
            .map(|r| d[r * c..(r + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        self.push(Tensor::vector(out), Op::MeanCols(x), "mean_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = expect_matrix(self.value(x), "slice_cols")?;
        if start + len > c {
            return Err(Error::dim(format!(
                "slice_cols: {start}+{len} exceeds {c} columns"
            )));
        }
        let d = self.value(x).data();
        let data = (0..n)
            .flat_map(|r| d[r * c + start..r * c + start + len].iter().copied())
            .collect();
        self.push(
            Tensor::from_parts(vec![n, len], data),
            Op::SliceCols(x, start),
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = expect_matrix(self.value(p), "concat_cols")?;
            if r != n {
                return Err(Error::dim("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::from_parts(vec![n, total], data),
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = expect_matrix(self.value(x), "slice_rows")?;
        if start + len > n {
            return Err(Error::dim(format!(
                "slice_rows: {start}+{len} exceeds {n} rows"
            )));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(
            Tensor::from_parts(vec![len, c], data),
            Op::SliceRows(x, start),
            "slice_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, pc) = expect_matrix(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(Error::dim("concat_rows: column counts differ"));
            }
            n += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::from_parts(vec![n, c], data),
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (n, c) = expect_matrix(self.value(x), "transpose")?;
        let data = transpose_raw(self.value(x).data(), n, c);
        self.push(
            Tensor::from_parts(vec![c, n], data),
            Op::Transpose(x),
            "transpose",
        )
    }

    /// Row lookup `table[ids[i]]`, i.e. an embedding.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = expect_matrix(self.value(table), "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        let d = self.value(table).data();
        let data = ids
            .iter()
            .flat_map(|&i| d[i * c..(i + 1) * c].iter().copied())
            .collect();
        self.push(
            Tensor::from_parts(vec![ids.len(), c], data),
            Op::GatherRows(table, ids.to_vec()),
            "gather_rows",
        )
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if i >= t.numel() {
            return Err(Error::dim(format!("index {i} out of {}", t.numel())));
        }
        let v = t.data()[i];
        self.push(Tensor::scalar(v), Op::Index(x, i), "index")
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(
                "mul_scalar_var: multiplier must have one element",
            ));
        }
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v * sv);
        self.push(t, Op::MulScalarVar(x, s), "mul_scalar_var")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// A graph can be differentiated once; build a new one for the next step.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; run a fresh forward".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NumericGuard("backward"));
        }
        let seed = Tensor::filled(lv.shape(), 1.0);
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        let params = self
            .params
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let unary = |x: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let xd = val(x).data();
            let data = gd
                .iter()
                .zip(xd)
                .zip(y.data())
                .map(|((&g, &x), &y)| f(g, x, y))
                .collect();
            like(x, data)
        };

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let m = val(*b).shape()[1];
                if wants(*a) {
                    let bt = transpose_raw(val(*b).data(), k, m);
                    acc(*a, like(*a, matmul_raw(gd, &bt, n, m, k)));
                }
                if wants(*b) {
                    let at = transpose_raw(val(*a).data(), n, k);
                    acc(*b, like(*b, matmul_raw(&at, gd, k, n, m)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(
                        *a,
                        like(*a, gd.iter().zip(bd).map(|(g, b)| g * b).collect()),
                    );
                }
                if wants(*b) {
                    acc(
                        *b,
                        like(*b, gd.iter().zip(ad).map(|(g, a)| g * a).collect()),
                    );
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(
                        *a,
                        like(*a, gd.iter().zip(bd).map(|(g, b)| g / b).collect()),
                    );
                }
                if wants(*b) {
                    let data = gd
                        .iter()
                        .zip(ad)
                        .zip(bd)
                        .map(|((g, a), b)| -g * a / (b * b))
                        .collect();
                    acc(*b, like(*b, data));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if wants(*b) {
                    acc(*b, Tensor::vector(col_sums(gd, g.rows(), g.cols())));
                }
            }
            Op::MulRow(x, v) => {
                let (n, c) = (g.rows(), g.cols());
                let vd = val(*v).data();
                if wants(*x) {
                    let data = gd
                        .iter()
                        .enumerate()
                        .map(|(idx, g)| g * vd[idx % c])
                        .collect();
                    acc(*x, like(*x, data));
                }
                if wants(*v) {
                    let prod: Vec<f64> =
                        gd.iter().zip(val(*x).data()).map(|(g, x)| g * x).collect();
                    acc(*v, Tensor::vector(col_sums(&prod, n, c)));
                }
            }
            Op::BroadcastRows(b) => {
                acc(*b, Tensor::vector(col_sums(gd, g.rows(), g.cols())));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, like(*x, gd.to_vec())),
            Op::Exp(x) => acc(*x, unary(*x, &|g, _, y| g * y)),
            Op::Ln(x) => acc(*x, unary(*x, &|g, x, _| g / x)),
            Op::Square(x) => acc(*x, unary(*x, &|g, x, _| 2.0 * g * x)),
            Op::Relu(x) => acc(*x, unary(*x, &|g, x, _| if x > 0.0 { g } else { 0.0 })),
            Op::Sigmoid(x) => acc(*x, unary(*x, &|g, _, y| g * y * (1.0 - y))),
            Op::Softplus(x) => acc(*x, unary(*x, &|g, x, _| g * sigmoid_scalar(x))),
            Op::Gelu(x) => acc(*x, unary(*x, &|g, x, _| g * gelu_grad_scalar(x))),
            Op::Softmax(x) => {
                let (rows, cols) = (y.rows(), y.cols());
                let yd = y.data();
                let mut data = vec![0.0; yd.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = gd[s.clone()]
                        .iter()
                        .zip(&yd[s.clone()])
                        .map(|(g, y)| g * y)
                        .sum();
                    for j in s {
                        data[j] = yd[j] * (gd[j] - dot);
                    }
                }
                acc(*x, like(*x, data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, c) = (y.rows(), y.cols());
                let gain_d = val(*gain).data();
                if wants(*bias) {
                    acc(*bias, Tensor::vector(col_sums(gd, n, c)));
                }
                if wants(*gain) {
                    let prod: Vec<f64> = gd.iter().zip(xhat).map(|(g, h)| g * h).collect();
                    acc(*gain, Tensor::vector(col_sums(&prod, n, c)));
                }
                if wants(*x) {
                    let mut data = vec![0.0; n * c];
                    for r in 0..n {
                        let s = r * c;
                        let gh: Vec<f64> = (0..c).map(|j| gd[s + j] * gain_d[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghx = (0..c).map(|j| gh[j] * xhat[s + j]).sum::<f64>() / c as f64;
                        for j in 0..c {
                            data[s + j] = rstd[r] * (gh[j] - mean_gh - xhat[s + j] * mean_ghx);
                        }
                    }
                    acc(*x, like(*x, data));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = val(*logits).cols();
                let g0 = gd[0];
                let mut data = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut data[r * v..(r + 1) * v];
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|p| *p *= w * g0);
                }
                acc(*logits, like(*logits, data));
            }
            Op::Sum(x) => acc(*x, Tensor::filled(val(*x).shape(), gd[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, Tensor::filled(val(*x).shape(), gd[0] / n));
            }
            Op::MeanCols(x) => {
                let c = val(*x).cols();
                let data = (0..val(*x).numel()).map(|i| gd[i / c] / c as f64).collect();
                acc(*x, like(*x, data));
            }
            Op::SliceCols(x, start) => {
                let (n, c) = (val(*x).rows(), val(*x).cols());
                let len = g.cols();
                let mut data = vec![0.0; n * c];
                for r in 0..n {
                    data[r * c + start..r * c + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(*x, like(*x, data));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let n = g.rows();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let data = (0..n)
                            .flat_map(|r| gd[r * total + off..r * total + off + w].iter().copied())
                            .collect();
                        acc(p, like(p, data));
                    }
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let c = val(*x).cols();
                let mut data = vec![0.0; val(*x).numel()];
                data[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(*x, like(*x, data));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if wants(p) {
                        acc(p, like(p, gd[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::Transpose(x) => {
                let (n, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, like(*x, transpose_raw(gd, c, n)));
            }
            Op::GatherRows(table, ids) => {
                let c = val(*table).cols();
                let mut data = vec![0.0; val(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        data[id * c + j] += gd[r * c + j];
                    }
                }
                acc(*table, like(*table, data));
            }
            Op::Index(x, idx) => {
                let mut data = vec![0.0; val(*x).numel()];
                data[*idx] = gd[0];
                acc(*x, like(*x, data));
            }
            Op::MulScalarVar(x, s) => {
                let sv = val(*s).item();
                if wants(*x) {
                    acc(*x, g.map(|v| v * sv));
                }
                if wants(*s) {
                    let dot: f64 = gd.iter().zip(val(*x).data()).map(|(g, x)| g * x).sum();
                    acc(*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![dot]));
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter that reached the loss.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Dense per-parameter gradients aligned with `store`, zeros where absent.
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        for (id, g) in self.params() {
            out[id.index()] = g.clone();
        }
        out
    }
}
