//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation computes its output eagerly and records enough metadata
//! to replay the adjoint computation in exact reverse execution order.
//! The op set is exactly what the encoder and objective need; there is no
//! broadcasting beyond what the listed ops define.
//!
//! Alongside values, the tape folds an *activation signature* hash: the sign
//! pattern of every relu input (with a configurable near-zero margin) and the
//! arg-max choices of every pooling op. Two forward passes whose signatures
//! differ straddle a kink, which the gradient checker uses to exclude
//! non-differentiable coordinates.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::param::{ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    EmbeddingLookup { table: Var, ids: Vec<usize> },
    TextConv { input: Var, filters: Var, bias: Var },
    MaxPoolTime { input: Var, argmax: Vec<usize> },
    Relu { input: Var },
    Sigmoid { input: Var },
    Dense { input: Var, weight: Var, bias: Var },
    MatVecBias { matrix: Var, vector: Var, bias: Var },
    ScaleRows { input: Var, gates: Var },
    Concat { parts: Vec<Var> },
    HConcat { parts: Vec<Var> },
    RowSlice { input: Var, row: usize },
    Add { a: Var, b: Var },
    Dot { a: Var, b: Var },
    SquaredError { pred: Var, target: f64 },
    SquareSum { input: Var },
    Scale { input: Var, c: f64 },
    Sum { terms: Vec<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::TextConv { .. } => "text_conv",
            Op::MaxPoolTime { .. } => "max_pool_over_time",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Dense { .. } => "dense",
            Op::MatVecBias { .. } => "matvec_bias",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Concat { .. } => "concat",
            Op::HConcat { .. } => "hconcat",
            Op::RowSlice { .. } => "row_slice",
            Op::Add { .. } => "add",
            Op::Dot { .. } => "dot",
            Op::SquaredError { .. } => "squared_error",
            Op::SquareSum { .. } => "square_sum",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    check_finite: bool,
    kink_margin: f64,
    sig: u64,
}

fn sig_mix(sig: &mut u64, x: u64) {
    *sig = (*sig ^ x).wrapping_mul(0x100000001b3);
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            check_finite: false,
            kink_margin: 1e-6,
            sig: 0xcbf29ce484222325,
        }
    }

    /// Enable trapping of NaN/Inf after every operation.
    pub fn with_finite_check(mut self, enabled: bool) -> Tape {
        self.check_finite = enabled;
        self
    }

    /// Margin within which relu inputs and pool ties count as "at a kink"
    /// for the activation signature.
    pub fn with_kink_margin(mut self, margin: f64) -> Tape {
        self.kink_margin = margin;
        self
    }

    /// Hash of the activation pattern of everything executed so far.
    pub fn signature(&self) -> u64 {
        self.sig
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite {
            value
                .assert_finite(op.name())
                .map_err(|e| Error::Train(format!("finite check: {e}")))?;
        }
        let id = Var(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Bring a parameter onto the tape. Each parameter gets one node per
    /// tape; repeated uses share it so adjoints accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param(id))?;
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    /// Row gather: output row `i` is row `ids[i]` of `table`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "embedding_lookup expects a matrix table, got shape {:?}",
                t.shape()
            )));
        }
        let rows = t.rows();
        let width = t.row_width();
        let mut out = Tensor::zeros(&[ids.len(), width]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::Index(format!(
                    "embedding_lookup id {id} at position {i} out of range for table with {rows} rows"
                )));
            }
            out.row_mut(i).copy_from_slice(self.value(table).row(id));
        }
        self.push(
            out,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Full-width convolution sliding along the first axis.
    ///
    /// `input` is `[T, D]`, `filters` is `[f, D, C]`, `bias` is `[C]`;
    /// output `[T-f+1, C]` with
    /// `out[t][c] = bias[c] + sum_{j<f, d<D} input[t+j][d] * filters[j][d][c]`.
    pub fn text_conv(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var> {
        let (t_len, d_in) = {
            let x = self.value(input);
            if x.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "text_conv input must be a matrix, got {:?}",
                    x.shape()
                )));
            }
            (x.shape()[0], x.shape()[1])
        };
        let (f, d_flt, c) = {
            let w = self.value(filters);
            if w.shape().len() != 3 {
                return Err(Error::Shape(format!(
                    "text_conv filters must be [f, D, C], got {:?}",
                    w.shape()
                )));
            }
            (w.shape()[0], w.shape()[1], w.shape()[2])
        };
        if d_flt != d_in {
            return Err(Error::Shape(format!(
                "text_conv width mismatch: input {:?} vs filters {:?}",
                self.value(input).shape(),
                self.value(filters).shape()
            )));
        }
        if f > t_len {
            return Err(Error::Shape(format!(
                "text_conv filter length {f} exceeds input length {t_len}"
            )));
        }
        if self.value(bias).shape() != [c] {
            return Err(Error::Shape(format!(
                "text_conv bias shape {:?} does not match {c} channels",
                self.value(bias).shape()
            )));
        }

        let out_t = t_len - f + 1;
        let mut out = Tensor::zeros(&[out_t, c]);
        {
            let x = self.value(input).data();
            let w = self.value(filters).data();
            let b = self.value(bias).data();
            let o = out.data_mut();
            for t in 0..out_t {
                let row = &mut o[t * c..(t + 1) * c];
                row.copy_from_slice(b);
                for j in 0..f {
                    let xr = &x[(t + j) * d_in..(t + j + 1) * d_in];
                    for (d, &xv) in xr.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wr = &w[(j * d_in + d) * c..(j * d_in + d + 1) * c];
                        for (rc, &wv) in row.iter_mut().zip(wr) {
                            *rc += xv * wv;
                        }
                    }
                }
            }
        }
        self.push(out, Op::TextConv { input, filters, bias })
    }

    /// Column-wise max over the first axis. Ties break to the lowest index;
    /// the adjoint is routed only there.
    pub fn max_pool_over_time(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 2 || x.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "max_pool_over_time needs a non-empty [T, C] input, got {:?}",
                x.shape()
            )));
        }
        let (t_len, c) = (x.shape()[0], x.shape()[1]);
        let mut best = x.row(0).to_vec();
        let mut argmax = vec![0usize; c];
        let mut second = vec![f64::NEG_INFINITY; c];
        for t in 1..t_len {
            for (ch, &v) in x.row(t).iter().enumerate() {
                if v > best[ch] {
                    second[ch] = best[ch];
                    best[ch] = v;
                    argmax[ch] = t;
                } else if v > second[ch] {
                    second[ch] = v;
                }
            }
        }
        let margin = self.kink_margin;
        for ch in 0..c {
            sig_mix(&mut self.sig, argmax[ch] as u64);
            let near_tie = t_len > 1 && (best[ch] - second[ch]).abs() <= margin;
            sig_mix(&mut self.sig, near_tie as u64);
        }
        let out = Tensor::from_vec(&[c], best)?;
        self.push(out, Op::MaxPoolTime { input, argmax })
    }

    /// `max(0, x)` elementwise, with derivative 0 at the origin.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let margin = self.kink_margin;
        let mut sig = self.sig;
        let (shape, data) = {
            let x = self.value(input);
            let data: Vec<f64> = x
                .data()
                .iter()
                .map(|&v| {
                    let state = if v > margin {
                        1u64
                    } else if v < -margin {
                        2
                    } else {
                        0
                    };
                    sig_mix(&mut sig, state);
                    if v > 0.0 {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
            (x.shape().to_vec(), data)
        };
        self.sig = sig;
        let out = Tensor::from_vec(&shape, data)?;
        self.push(out, Op::Relu { input })
    }

    /// Logistic function elementwise.
    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data: Vec<f64> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        self.push(out, Op::Sigmoid { input })
    }

    /// `out[j] = bias[j] + sum_i input[i] * weight[i][j]` for vector input.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = self.value(input).len();
        let w = self.value(weight);
        if w.shape().len() != 2 || w.shape()[0] != n {
            return Err(Error::Shape(format!(
                "dense weight {:?} does not accept input of {n} elements",
                w.shape()
            )));
        }
        let p = w.shape()[1];
        if self.value(bias).shape() != [p] {
            return Err(Error::Shape(format!(
                "dense bias shape {:?} does not match {p} outputs",
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(bias).data().to_vec();
        {
            let x = self.value(input).data();
            let wd = self.value(weight).data();
            for (i, &xv) in x.iter().enumerate() {
                let wr = &wd[i * p..(i + 1) * p];
                for (o, &wv) in out.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        let out = Tensor::from_vec(&[p], out)?;
        self.push(out, Op::Dense { input, weight, bias })
    }

    /// Row-wise affine form: `out[i] = sum_j matrix[i][j] * vector[j] + bias`,
    /// with a scalar bias node broadcast over rows.
    pub fn matvec_bias(&mut self, matrix: Var, vector: Var, bias: Var) -> Result<Var> {
        let m = self.value(matrix);
        if m.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "matvec_bias matrix must be 2-d, got {:?}",
                m.shape()
            )));
        }
        let (rows, width) = (m.shape()[0], m.shape()[1]);
        if self.value(vector).len() != width {
            return Err(Error::Shape(format!(
                "matvec_bias vector of {} elements does not match matrix {:?}",
                self.value(vector).len(),
                m.shape()
            )));
        }
        if !self.value(bias).is_scalar() {
            return Err(Error::Shape(format!(
                "matvec_bias bias must be scalar, got {:?}",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).item();
        let mut out = vec![b; rows];
        {
            let md = self.value(matrix).data();
            let vd = self.value(vector).data();
            for (i, o) in out.iter_mut().enumerate() {
                let row = &md[i * width..(i + 1) * width];
                *o += row.iter().zip(vd).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let out = Tensor::from_vec(&[rows], out)?;
        self.push(out, Op::MatVecBias { matrix, vector, bias })
    }

    /// Multiply row `i` of `input` by `gates[i]`.
    pub fn scale_rows(&mut self, input: Var, gates: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "scale_rows input must be a matrix, got {:?}",
                x.shape()
            )));
        }
        let (rows, width) = (x.shape()[0], x.shape()[1]);
        if self.value(gates).len() != rows {
            return Err(Error::Shape(format!(
                "scale_rows gate vector of {} elements does not match {rows} rows",
                self.value(gates).len()
            )));
        }
        let mut out = Tensor::zeros(&[rows, width]);
        for i in 0..rows {
            let g = self.value(gates).data()[i];
            let src = self.value(input).row(i).to_vec();
            for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                *o = g * v;
            }
        }
        self.push(out, Op::ScaleRows { input, gates })
    }

    /// Flat concatenation of the parts' data, reshaped to `out_shape`.
    pub fn concat(&mut self, parts: &[Var], out_shape: &[usize]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).len()).sum();
        let expected: usize = out_shape.iter().product();
        if total != expected {
            return Err(Error::Shape(format!(
                "concat of {total} elements cannot fill shape {out_shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(total);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(out_shape, data)?;
        self.push(out, Op::Concat { parts: parts.to_vec() })
    }

    /// Row-wise concatenation of matrices with equal row counts.
    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("hconcat of zero tensors".into()));
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut total_w = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.shape()[0] != rows {
                return Err(Error::Shape(format!(
                    "hconcat parts must be matrices with {rows} rows, got {:?}",
                    t.shape()
                )));
            }
            total_w += t.shape()[1];
        }
        let mut out = Tensor::zeros(&[rows, total_w]);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r).to_vec();
                out.row_mut(r)[off..off + src.len()].copy_from_slice(&src);
                off += src.len();
            }
        }
        self.push(out, Op::HConcat { parts: parts.to_vec() })
    }

    /// View row `row` of a matrix as a vector.
    pub fn row_slice(&mut self, input: Var, row: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "row_slice input must be a matrix, got {:?}",
                x.shape()
            )));
        }
        if row >= x.rows() {
            return Err(Error::Index(format!(
                "row_slice row {row} out of range for {:?}",
                x.shape()
            )));
        }
        let out = Tensor::from_vec(&[x.row_width()], x.row(row).to_vec())?;
        self.push(out, Op::RowSlice { input, row })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        self.push(out, Op::Add { a, b })
    }

    /// Inner product of two equal-length tensors; scalar output.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Shape(format!(
                "dot lengths differ: {} vs {}",
                self.value(a).len(),
                self.value(b).len()
            )));
        }
        let v: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Tensor::scalar(v), Op::Dot { a, b })
    }

    /// `(pred - target)^2` for a scalar prediction against a constant target.
    pub fn squared_error(&mut self, pred: Var, target: f64) -> Result<Var> {
        if !self.value(pred).is_scalar() {
            return Err(Error::Shape(format!(
                "squared_error prediction must be scalar, got {:?}",
                self.value(pred).shape()
            )));
        }
        let d = self.value(pred).item() - target;
        self.push(Tensor::scalar(d * d), Op::SquaredError { pred, target })
    }

    /// Sum of squares of all elements; scalar output.
    pub fn square_sum(&mut self, input: Var) -> Result<Var> {
        let v: f64 = self.value(input).data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(v), Op::SquareSum { input })
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, input: Var, c: f64) -> Result<Var> {
        let x = self.value(input);
        let data: Vec<f64> = x.data().iter().map(|v| c * v).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        self.push(out, Op::Scale { input, c })
    }

    /// Sum of scalar terms.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::Shape("sum of zero terms".into()));
        }
        let mut v = 0.0;
        for &t in terms {
            if !self.value(t).is_scalar() {
                return Err(Error::Shape(format!(
                    "sum terms must be scalars, got {:?}",
                    self.value(t).shape()
                )));
            }
            v += self.value(t).item();
        }
        self.push(Tensor::scalar(v), Op::Sum { terms: terms.to_vec() })
    }

    /// Reverse pass from a scalar loss. Adjoints of parameter nodes are
    /// added into the store's gradients, so repeated backward calls (and
    /// repeated parameter uses) accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let upstream = match adj[i].take() {
                Some(u) => u,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &upstream)?,
                Op::EmbeddingLookup { table, ids } => {
                    let width = self.nodes[table.0].value.row_width();
                    let acc = grad_buf(&mut adj, table.0, self.nodes[table.0].value.len());
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &upstream[row * width..(row + 1) * width];
                        let dst = &mut acc[id * width..(id + 1) * width];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::TextConv { input, filters, bias } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[filters.0].value;
                    let (t_len, d) = (x.shape()[0], x.shape()[1]);
                    let (f, c) = (w.shape()[0], w.shape()[2]);
                    let out_t = t_len - f + 1;

                    {
                        let acc = grad_buf(&mut adj, input.0, x.len());
                        let wd = w.data();
                        for t in 0..out_t {
                            let u = &upstream[t * c..(t + 1) * c];
                            for j in 0..f {
                                let dst = &mut acc[(t + j) * d..(t + j + 1) * d];
                                for (dd, item) in dst.iter_mut().enumerate() {
                                    let wr = &wd[(j * d + dd) * c..(j * d + dd + 1) * c];
                                    *item += u.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                    {
                        let xd = x.data().to_vec();
                        let acc = grad_buf(&mut adj, filters.0, w.len());
                        for t in 0..out_t {
                            let u = &upstream[t * c..(t + 1) * c];
                            for j in 0..f {
                                let xr = &xd[(t + j) * d..(t + j + 1) * d];
                                for (dd, &xv) in xr.iter().enumerate() {
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let dst = &mut acc[(j * d + dd) * c..(j * d + dd + 1) * c];
                                    for (g, &uv) in dst.iter_mut().zip(u) {
                                        *g += xv * uv;
                                    }
                                }
                            }
                        }
                    }
                    {
                        let acc = grad_buf(&mut adj, bias.0, c);
                        for t in 0..out_t {
                            let u = &upstream[t * c..(t + 1) * c];
                            for (g, &uv) in acc.iter_mut().zip(u) {
                                *g += uv;
                            }
                        }
                    }
                }
                Op::MaxPoolTime { input, argmax } => {
                    let c = argmax.len();
                    let acc = grad_buf(&mut adj, input.0, self.nodes[input.0].value.len());
                    for ch in 0..c {
                        acc[argmax[ch] * c + ch] += upstream[ch];
                    }
                }
                Op::Relu { input } => {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let acc = grad_buf(&mut adj, input.0, x.len());
                    for ((g, &xv), &u) in acc.iter_mut().zip(&x).zip(&upstream) {
                        if xv > 0.0 {
                            *g += u;
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let y = self.nodes[i].value.data().to_vec();
                    let acc = grad_buf(&mut adj, input.0, y.len());
                    for ((g, &yv), &u) in acc.iter_mut().zip(&y).zip(&upstream) {
                        *g += u * yv * (1.0 - yv);
                    }
                }
                Op::Dense { input, weight, bias } => {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let wd = self.nodes[weight.0].value.data().to_vec();
                    let n_in = x.len();
                    let p = upstream.len();
                    {
                        let acc = grad_buf(&mut adj, input.0, n_in);
                        for (idx, g) in acc.iter_mut().enumerate() {
                            let wr = &wd[idx * p..(idx + 1) * p];
                            *g += upstream.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    {
                        let acc = grad_buf(&mut adj, weight.0, n_in * p);
                        for (idx, &xv) in x.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let dst = &mut acc[idx * p..(idx + 1) * p];
                            for (g, &uv) in dst.iter_mut().zip(&upstream) {
                                *g += xv * uv;
                            }
                        }
                    }
                    {
                        let acc = grad_buf(&mut adj, bias.0, p);
                        for (g, &uv) in acc.iter_mut().zip(&upstream) {
                            *g += uv;
                        }
                    }
                }
                Op::MatVecBias { matrix, vector, bias } => {
                    let md = self.nodes[matrix.0].value.data().to_vec();
                    let vd = self.nodes[vector.0].value.data().to_vec();
                    let rows = upstream.len();
                    let width = vd.len();
                    {
                        let acc = grad_buf(&mut adj, matrix.0, rows * width);
                        for r in 0..rows {
                            let u = upstream[r];
                            if u == 0.0 {
                                continue;
                            }
                            let dst = &mut acc[r * width..(r + 1) * width];
                            for (g, &vv) in dst.iter_mut().zip(&vd) {
                                *g += u * vv;
                            }
                        }
                    }
                    {
                        let acc = grad_buf(&mut adj, vector.0, width);
                        for r in 0..rows {
                            let u = upstream[r];
                            let mr = &md[r * width..(r + 1) * width];
                            for (g, &mv) in acc.iter_mut().zip(mr) {
                                *g += u * mv;
                            }
                        }
                    }
                    {
                        let acc = grad_buf(&mut adj, bias.0, 1);
                        acc[0] += upstream.iter().sum::<f64>();
                    }
                }
                Op::ScaleRows { input, gates } => {
                    let x = self.nodes[input.0].value.data().to_vec();
                    let gd = self.nodes[gates.0].value.data().to_vec();
                    let rows = gd.len();
                    let width = x.len() / rows;
                    {
                        let acc = grad_buf(&mut adj, input.0, x.len());
                        for r in 0..rows {
                            let g = gd[r];
                            let u = &upstream[r * width..(r + 1) * width];
                            let dst = &mut acc[r * width..(r + 1) * width];
                            for (a, &uv) in dst.iter_mut().zip(u) {
                                *a += g * uv;
                            }
                        }
                    }
                    {
                        let acc = grad_buf(&mut adj, gates.0, rows);
                        for r in 0..rows {
                            let u = &upstream[r * width..(r + 1) * width];
                            let xr = &x[r * width..(r + 1) * width];
                            acc[r] += u.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        let src = &upstream[off..off + len];
                        let acc = grad_buf(&mut adj, p.0, len);
                        for (g, s) in acc.iter_mut().zip(src) {
                            *g += s;
                        }
                        off += len;
                    }
                }
                Op::HConcat { parts } => {
                    let rows = self.nodes[parts[0].0].value.shape()[0];
                    let total_w: usize =
                        parts.iter().map(|&p| self.nodes[p.0].value.shape()[1]).sum();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.shape()[1];
                        let acc = grad_buf(&mut adj, p.0, rows * w);
                        for r in 0..rows {
                            let src = &upstream[r * total_w + off..r * total_w + off + w];
                            let dst = &mut acc[r * w..(r + 1) * w];
                            for (g, s) in dst.iter_mut().zip(src) {
                                *g += s;
                            }
                        }
                        off += w;
                    }
                }
                Op::RowSlice { input, row } => {
                    let width = self.nodes[input.0].value.row_width();
                    let acc = grad_buf(&mut adj, input.0, self.nodes[input.0].value.len());
                    let dst = &mut acc[row * width..(row + 1) * width];
                    for (g, s) in dst.iter_mut().zip(&upstream) {
                        *g += s;
                    }
                }
                Op::Add { a, b } => {
                    for &side in &[a, b] {
                        let acc = grad_buf(&mut adj, side.0, upstream.len());
                        for (g, s) in acc.iter_mut().zip(&upstream) {
                            *g += s;
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let u = upstream[0];
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    {
                        let acc = grad_buf(&mut adj, a.0, av.len());
                        for (g, &bvv) in acc.iter_mut().zip(&bv) {
                            *g += u * bvv;
                        }
                    }
                    {
                        let acc = grad_buf(&mut adj, b.0, bv.len());
                        for (g, &avv) in acc.iter_mut().zip(&av) {
                            *g += u * avv;
                        }
                    }
                }
                Op::SquaredError { pred, target } => {
                    let p = self.nodes[pred.0].value.item();
                    let acc = grad_buf(&mut adj, pred.0, 1);
                    acc[0] += upstream[0] * 2.0 * (p - target);
                }
                Op::SquareSum { input } => {
                    let u = upstream[0];
                    let x = self.nodes[input.0].value.data().to_vec();
                    let acc = grad_buf(&mut adj, input.0, x.len());
                    for (g, &xv) in acc.iter_mut().zip(&x) {
                        *g += u * 2.0 * xv;
                    }
                }
                Op::Scale { input, c } => {
                    let acc = grad_buf(&mut adj, input.0, upstream.len());
                    for (g, &u) in acc.iter_mut().zip(&upstream) {
                        *g += c * u;
                    }
                }
                Op::Sum { terms } => {
                    for &t in terms {
                        let acc = grad_buf(&mut adj, t.0, 1);
                        acc[0] += upstream[0];
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn grad_buf<'a>(adj: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    adj[idx].get_or_insert_with(|| vec![0.0; len])
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
