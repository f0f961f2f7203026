//! Dense tensor algebra with reverse-mode automatic differentiation.
//!
//! Everything runs on a `Tape`: a linear record of executed operations over
//! an arena of tensors. Forward methods append a node; `backward` walks the
//! record in reverse and accumulates gradients into every tensor that
//! requires them.
//!
//! Numeric discipline shared with the streaming decoder (see `kernels`):
//! all reductions sum left-to-right along the last axis, so a vectorised
//! forward pass and a step-wise recomputation of the same quantity agree
//! bit-for-bit. Values are 64-bit floats; 32-bit floats appear only in
//! checkpoint storage.

use crate::error::{Error, Result};

/// Row-level primitives used by both the tape ops and the streaming decoder.
///
/// Keeping one implementation of each kernel is what guarantees the
/// step-wise inference path reproduces the vectorised training path exactly.
pub mod kernels {
    /// `out[j] = sum_k x[k] * w[k*n + j]`, k ascending.
    pub fn matvec_into(x: &[f64], w: &[f64], n: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len() * n, w.len());
        debug_assert_eq!(out.len(), n);
        out.fill(0.0);
        for (k, &xv) in x.iter().enumerate() {
            let wrow = &w[k * n..(k + 1) * n];
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }

    /// `c[i*n+j] = sum_k a[i*k+.] * b[.*n+j]`; row i is bit-identical to
    /// `matvec_into` on row i of `a`.
    pub fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            matvec_into(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
        }
    }

    /// `sum_k a[k] * b[k]`, k ascending.
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = 0.0;
        for k in 0..a.len() {
            acc += a[k] * b[k];
        }
        acc
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// Max-shifted softmax. Entries of `-inf` are allowed (masked positions)
    /// and come out exactly 0; the caller must ensure at least one finite
    /// entry. Division (not reciprocal multiplication) keeps every output
    /// in [0, 1] exactly.
    pub fn softmax_row_into(row: &[f64], out: &mut [f64]) {
        debug_assert_eq!(row.len(), out.len());
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        debug_assert!(max > f64::NEG_INFINITY, "softmax over fully-masked row");
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }

    /// Max-shifted log-softmax.
    pub fn log_softmax_row_into(row: &[f64], out: &mut [f64]) {
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v - lse;
        }
    }

    /// Mean-0 / variance-1 normalisation over one row, then affine.
    pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) {
        let d = x.len();
        let mut mean = 0.0;
        for &v in x {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in x {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[j] = (x[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
}

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// A dense tensor: shape, contiguous 64-bit values, and an optional gradient
/// buffer of identical shape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One recorded operation; indices refer to earlier tape positions, so a
/// reverse walk visits every op after all of its consumers.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Sigmoid {
        a: usize,
    },
    Relu {
        a: usize,
    },
    SoftmaxRows {
        a: usize,
    },
    LogSoftmaxRows {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    SumAll {
        a: usize,
    },
    Transpose {
        a: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    MaskFill {
        a: usize,
        keep: Vec<bool>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
}

/// The computation record: tensor arena plus the op that produced each entry.
#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("rank > 2 is never constructed"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.tensors.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        self.ops.push(op);
        TensorId(self.tensors.len() - 1)
    }

    /// Insert an input tensor.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert!(
            shape.len() == 1 || shape.len() == 2,
            "tensors are rank 1 or 2, got {shape:?}"
        );
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Constant scalar leaf, shape `[1]`.
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![v], vec![1], false)
    }

    fn tracked(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.tensors[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Add a rank-1 bias to every row of a matrix.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = rows_cols(self.shape(a));
        if self.shape(bias) != [n] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.data(a).to_vec();
        let bv = self.data(bias).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[j];
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a, bias]);
        Ok(self.push(
            data,
            shape,
            rg,
            Op::AddBias {
                a: a.0,
                bias: bias.0,
            },
        ))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a]);
        self.push(data, shape, rg, Op::Scale { a: a.0, c })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a]);
        self.push(data, shape, rg, Op::Sigmoid { a: a.0 })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a]);
        self.push(data, shape, rg, Op::Relu { a: a.0 })
    }

    /// Row-wise softmax of a matrix. Tolerates `-inf` entries from masking;
    /// a fully-masked row is a contract error.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = rows_cols(self.shape(a));
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            if row.iter().all(|&v| v == f64::NEG_INFINITY) {
                return Err(Error::Contract(format!(
                    "softmax_rows: row {i} is fully masked"
                )));
            }
            kernels::softmax_row_into(row, &mut data[i * n..(i + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a]);
        Ok(self.push(data, shape, rg, Op::SoftmaxRows { a: a.0 }))
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = rows_cols(self.shape(a));
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            if row.iter().all(|&v| v == f64::NEG_INFINITY) {
                return Err(Error::Contract(format!(
                    "log_softmax_rows: row {i} is fully masked"
                )));
            }
            kernels::log_softmax_row_into(row, &mut data[i * n..(i + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a]);
        Ok(self.push(data, shape, rg, Op::LogSoftmaxRows { a: a.0 }))
    }

    /// Last-axis layer normalisation with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm: eps must be > 0, got {eps}"
            )));
        }
        let (m, d) = rows_cols(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            kernels::layer_norm_row(
                &src[i * d..(i + 1) * d],
                &g,
                &b,
                eps,
                &mut data[i * d..(i + 1) * d],
            );
        }
        let shape = self.shape(x).to_vec();
        let rg = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            data,
            shape,
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        ))
    }

    /// Sum of all entries, shape `[1]`. Left-to-right over storage order.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut s = 0.0;
        for &v in self.data(a) {
            s += v;
        }
        let rg = self.tracked(&[a]);
        self.push(vec![s], vec![1], rg, Op::SumAll { a: a.0 })
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.tracked(&[a]);
        Ok(self.push(data, vec![n, m], rg, Op::Transpose { a: a.0 }))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.tracked(&[a]);
        Ok(self.push(data, vec![m, len], rg, Op::SliceCols { a: a.0, start, len }))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: empty part list".into()));
        }
        let m = rows_cols(self.shape(parts[0])).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = rows_cols(self.shape(p));
            if pm != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += pn;
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let (_, pn) = rows_cols(self.shape(p));
            let src = self.data(p);
            for i in 0..m {
                data[i * total + off..i * total + off + pn]
                    .copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let rg = self.tracked(parts);
        Ok(self.push(
            data,
            vec![m, total],
            rg,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Replace entries where `keep` is false with `value`. Gradient flows
    /// through kept entries only.
    pub fn mask_fill(&mut self, a: TensorId, keep: &[bool], value: f64) -> Result<TensorId> {
        if keep.len() != self.data(a).len() {
            return Err(Error::Dimension {
                op: "mask_fill",
                lhs: self.shape(a).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { value })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a]);
        Ok(self.push(
            data,
            shape,
            rg,
            Op::MaskFill {
                a: a.0,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: s,
                rhs: vec![],
            });
        }
        let (v, d) = (s[0], s[1]);
        let mut data = vec![0.0; ids.len() * d];
        let src = self.data(table);
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Data(format!(
                    "embedding: id {id} out of range 0..{v}"
                )));
            }
            data[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.tracked(&[table]);
        Ok(self.push(
            data,
            vec![ids.len(), d],
            rg,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every tensor on
    /// a path from a `requires_grad` leaf to the loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensors[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.tensors[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.tensors.len()).rev() {
            if !self.tensors[i].requires_grad {
                continue;
            }
            let g = match self.tensors[i].grad.as_ref() {
                Some(g) => g.clone(),
                None => continue, // not on a path to the loss
            };
            let op = self.ops[i].clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = rows_cols(&self.tensors[a].shape);
                    let n = rows_cols(&self.tensors[b].shape).1;
                    if self.tensors[a].requires_grad {
                        // dA[i,k] = sum_j g[i,j] * B[k,j]
                        let bdat = &self.tensors[b].data;
                        let mut da = vec![0.0; m * k];
                        for ii in 0..m {
                            let grow = &g[ii * n..(ii + 1) * n];
                            for (kk, slot) in da[ii * k..(ii + 1) * k].iter_mut().enumerate() {
                                let brow = &bdat[kk * n..(kk + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                *slot = acc;
                            }
                        }
                        accumulate(&mut self.tensors[a], &da);
                    }
                    if self.tensors[b].requires_grad {
                        // dB[k,j] = sum_i A[i,k] * g[i,j]
                        let adat = &self.tensors[a].data;
                        let mut db = vec![0.0; k * n];
                        for ii in 0..m {
                            let grow = &g[ii * n..(ii + 1) * n];
                            for kk in 0..k {
                                let av = adat[ii * k + kk];
                                let drow = &mut db[kk * n..(kk + 1) * n];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                        accumulate(&mut self.tensors[b], &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.tensors[a].requires_grad {
                        accumulate(&mut self.tensors[a], &g);
                    }
                    if self.tensors[b].requires_grad {
                        accumulate(&mut self.tensors[b], &g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.tensors[a].requires_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.tensors[b].data)
                            .map(|(gv, bv)| gv * bv)
                            .collect();
                        accumulate(&mut self.tensors[a], &da);
                    }
                    if self.tensors[b].requires_grad {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(&self.tensors[a].data)
                            .map(|(gv, av)| gv * av)
                            .collect();
                        accumulate(&mut self.tensors[b], &db);
                    }
                }
                Op::AddBias { a, bias } => {
                    let (m, n) = rows_cols(&self.tensors[i].shape);
                    if self.tensors[a].requires_grad {
                        accumulate(&mut self.tensors[a], &g);
                    }
                    if self.tensors[bias].requires_grad {
                        let mut db = vec![0.0; n];
                        for ii in 0..m {
                            for j in 0..n {
                                db[j] += g[ii * n + j];
                            }
                        }
                        accumulate(&mut self.tensors[bias], &db);
                    }
                }
                Op::Scale { a, c } => {
                    if self.tensors[a].requires_grad {
                        let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                        accumulate(&mut self.tensors[a], &da);
                    }
                }
                Op::Sigmoid { a } => {
                    if self.tensors[a].requires_grad {
                        let out = &self.tensors[i].data;
                        let da: Vec<f64> = g
                            .iter()
                            .zip(out)
                            .map(|(gv, s)| gv * s * (1.0 - s))
                            .collect();
                        accumulate(&mut self.tensors[a], &da);
                    }
                }
                Op::Relu { a } => {
                    if self.tensors[a].requires_grad {
                        let src = &self.tensors[a].data;
                        let da: Vec<f64> = g
                            .iter()
                            .zip(src)
                            .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                            .collect();
                        accumulate(&mut self.tensors[a], &da);
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.tensors[a].requires_grad {
                        let (m, n) = rows_cols(&self.tensors[i].shape);
                        let out = &self.tensors[i].data;
                        let mut da = vec![0.0; m * n];
                        for ii in 0..m {
                            let mut dotv = 0.0;
                            for j in 0..n {
                                dotv += g[ii * n + j] * out[ii * n + j];
                            }
                            for j in 0..n {
                                da[ii * n + j] = out[ii * n + j] * (g[ii * n + j] - dotv);
                            }
                        }
                        accumulate(&mut self.tensors[a], &da);
                    }
                }
                Op::LogSoftmaxRows { a } => {
                    if self.tensors[a].requires_grad {
                        let (m, n) = rows_cols(&self.tensors[i].shape);
                        let out = &self.tensors[i].data;
                        let mut da = vec![0.0; m * n];
                        for ii in 0..m {
                            let mut gsum = 0.0;
                            for j in 0..n {
                                gsum += g[ii * n + j];
                            }
                            for j in 0..n {
                                da[ii * n + j] = g[ii * n + j] - out[ii * n + j].exp() * gsum;
                            }
                        }
                        accumulate(&mut self.tensors[a], &da);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (m, d) = rows_cols(&self.tensors[i].shape);
                    let xdat = self.tensors[x].data.clone();
                    let gdat = self.tensors[gain].data.clone();
                    let mut dx = vec![0.0; m * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let df = d as f64;
                    for ii in 0..m {
                        let xs = &xdat[ii * d..(ii + 1) * d];
                        let gs = &g[ii * d..(ii + 1) * d];
                        let mut mean = 0.0;
                        for &v in xs {
                            mean += v;
                        }
                        mean /= df;
                        let mut var = 0.0;
                        for &v in xs {
                            let c = v - mean;
                            var += c * c;
                        }
                        var /= df;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> =
                            gs.iter().zip(&gdat).map(|(gv, gn)| gv * gn).collect();
                        let mut dxhat_sum = 0.0;
                        let mut dxhat_xhat = 0.0;
                        for j in 0..d {
                            dgain[j] += gs[j] * xhat[j];
                            dbias[j] += gs[j];
                            dxhat_sum += dxhat[j];
                            dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        for j in 0..d {
                            dx[ii * d + j] =
                                inv_std / df * (df * dxhat[j] - dxhat_sum - xhat[j] * dxhat_xhat);
                        }
                    }
                    if self.tensors[x].requires_grad {
                        accumulate(&mut self.tensors[x], &dx);
                    }
                    if self.tensors[gain].requires_grad {
                        accumulate(&mut self.tensors[gain], &dgain);
                    }
                    if self.tensors[bias].requires_grad {
                        accumulate(&mut self.tensors[bias], &dbias);
                    }
                }
                Op::SumAll { a } => {
                    if self.tensors[a].requires_grad {
                        let da = vec![g[0]; self.tensors[a].data.len()];
                        accumulate(&mut self.tensors[a], &da);
                    }
                }
                Op::Transpose { a } => {
                    if self.tensors[a].requires_grad {
                        let (n, m) = rows_cols(&self.tensors[i].shape);
                        let mut da = vec![0.0; m * n];
                        for ii in 0..n {
                            for j in 0..m {
                                da[j * n + ii] = g[ii * m + j];
                            }
                        }
                        accumulate(&mut self.tensors[a], &da);
                    }
                }
                Op::SliceCols { a, start, len } => {
                    if self.tensors[a].requires_grad {
                        let (m, n) = rows_cols(&self.tensors[a].shape);
                        let mut da = vec![0.0; m * n];
                        for ii in 0..m {
                            for j in 0..len {
                                da[ii * n + start + j] = g[ii * len + j];
                            }
                        }
                        accumulate(&mut self.tensors[a], &da);
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = rows_cols(&self.tensors[i].shape).1;
                    let m = rows_cols(&self.tensors[i].shape).0;
                    let mut off = 0;
                    for &p in &parts {
                        let pn = rows_cols(&self.tensors[p].shape).1;
                        if self.tensors[p].requires_grad {
                            let mut dp = vec![0.0; m * pn];
                            for ii in 0..m {
                                dp[ii * pn..(ii + 1) * pn]
                                    .copy_from_slice(&g[ii * total + off..ii * total + off + pn]);
                            }
                            accumulate(&mut self.tensors[p], &dp);
                        }
                        off += pn;
                    }
                }
                Op::MaskFill { a, keep, .. } => {
                    if self.tensors[a].requires_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&keep)
                            .map(|(gv, &k)| if k { *gv } else { 0.0 })
                            .collect();
                        accumulate(&mut self.tensors[a], &da);
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.tensors[table].requires_grad {
                        let d = rows_cols(&self.tensors[table].shape).1;
                        let v = rows_cols(&self.tensors[table].shape).0;
                        let mut dt = vec![0.0; v * d];
                        for (row, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += g[row * d + j];
                            }
                        }
                        accumulate(&mut self.tensors[table], &dt);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(t: &mut Tensor, delta: &[f64]) {
    match t.grad.as_mut() {
        Some(g) => {
            for (gv, dv) in g.iter_mut().zip(delta) {
                *gv += dv;
            }
        }
        None => t.grad = Some(delta.to_vec()),
    }
}
