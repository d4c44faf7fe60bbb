//! Operation recording and reverse-mode gradient propagation.

use std::cell::RefCell;

use super::{shape_str, Result, Tensor, TensorError};

/// Recorded operation kind. Index-like arguments are captured here so the
/// backward rule is a pure function of (op, inputs, output, output grad).
enum Op {
    Add,
    AddBias,
    Sub,
    Neg,
    Mul,
    Scale(f64),
    AddConst,
    MulScalarT,
    Matmul,
    MatmulT,
    Transpose2d,
    Reshape,
    Sum,
    Mean,
    MeanAxis(usize),
    SoftmaxRows,
    LogSoftmaxRows,
    Log,
    Exp,
    Relu,
    Gelu,
    Concat { axis: usize },
    SliceRows { start: usize },
    SliceCols { start: usize },
    GatherRows { ids: Vec<usize> },
    PickPerRow { ids: Vec<usize> },
    Pick { index: usize },
    LayerNorm { eps: f64 },
    Im2col { kh: usize, kw: usize, sh: usize, sw: usize },
    AvgPool2d { k: usize, s: usize },
    /// Negative control: forward is `c*x` but the recorded rule reports `2c`.
    /// Exists so gradient-verification tests can prove they detect bad rules.
    ScaleMiscalibrated(f64),
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Per-forward-pass record of differentiable operations, in topological
/// order. Dropped (consumed) by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn any_grad(inputs: &[&Tensor]) -> bool {
    inputs.iter().any(|t| t.requires_grad())
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn record(&self, op: Op, inputs: Vec<Tensor>, output: &Tensor) {
        if output.requires_grad() {
            self.nodes.borrow_mut().push(Node {
                op,
                inputs,
                output: output.clone(),
            });
        }
    }

    fn unary(&self, op: Op, x: &Tensor, data: Vec<f64>) -> Tensor {
        let out = Tensor::from_vec(x.shape().to_vec(), data, x.requires_grad());
        self.record(op, vec![x.clone()], &out);
        out
    }

    // ── element-wise ────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = zip_map(a, b, |x, y| x + y);
        let out = Tensor::from_vec(a.shape().to_vec(), data, any_grad(&[a, b]));
        self.record(Op::Add, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// Broadcast add of a rank-1 bias over the last axis of a 2-D tensor.
    /// The only broadcasting form supported anywhere in the crate.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = dims2("add_bias", x)?;
        if bias.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                expected: format!("[{cols}]"),
                got: shape_str(bias.shape()),
            });
        }
        let xd = x.data();
        let bd = bias.data();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(xd[r * cols + c] + bd[c]);
            }
        }
        drop(xd);
        drop(bd);
        let out = Tensor::from_vec(vec![rows, cols], data, any_grad(&[x, bias]));
        self.record(Op::AddBias, vec![x.clone(), bias.clone()], &out);
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data = zip_map(a, b, |x, y| x - y);
        let out = Tensor::from_vec(a.shape().to_vec(), data, any_grad(&[a, b]));
        self.record(Op::Sub, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    pub fn neg(&self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| -v).collect();
        self.unary(Op::Neg, x, data)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let data = zip_map(a, b, |x, y| x * y);
        let out = Tensor::from_vec(a.shape().to_vec(), data, any_grad(&[a, b]));
        self.record(Op::Mul, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Tensor {
        let data = x.data().iter().map(|v| v * c).collect();
        self.unary(Op::Scale(c), x, data)
    }

    pub fn add_const(&self, x: &Tensor, c: f64) -> Tensor {
        let data = x.data().iter().map(|v| v + c).collect();
        self.unary(Op::AddConst, x, data)
    }

    /// Multiply every element of `x` by a one-element tensor `s`.
    /// Gradients flow into both `x` and `s`.
    pub fn mul_scalar_t(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_scalar_t",
                expected: "[1]".into(),
                got: shape_str(s.shape()),
            });
        }
        let sv = s.data()[0];
        let data = x.data().iter().map(|v| v * sv).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data, any_grad(&[x, s]));
        self.record(Op::MulScalarT, vec![x.clone(), s.clone()], &out);
        Ok(out)
    }

    #[doc(hidden)]
    pub fn scale_miscalibrated(&self, x: &Tensor, c: f64) -> Tensor {
        let data = x.data().iter().map(|v| v * c).collect();
        self.unary(Op::ScaleMiscalibrated(c), x, data)
    }

    // ── linear algebra / shape ──────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul", a)?;
        let (k2, n) = dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dims equal, lhs [{m}, {k}]"),
                got: shape_str(b.shape()),
            });
        }
        let data = matmul_raw(&a.data(), m, k, &b.data(), n);
        let out = Tensor::from_vec(vec![m, n], data, any_grad(&[a, b]));
        self.record(Op::Matmul, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    /// `a . b^T` without materializing the transpose: (m, k) x (n, k) ->
    /// (m, n). The workhorse of every linear layer (weights are stored
    /// (d_out, d_in)) and of attention scores.
    pub fn matmul_t(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul_t", a)?;
        let (n, k2) = dims2("matmul_t", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                expected: format!("last dims equal, lhs [{m}, {k}]"),
                got: shape_str(b.shape()),
            });
        }
        let data = matmul_t_raw(&a.data(), m, k, &b.data(), n);
        let out = Tensor::from_vec(vec![m, n], data, any_grad(&[a, b]));
        self.record(Op::MatmulT, vec![a.clone(), b.clone()], &out);
        Ok(out)
    }

    pub fn transpose2d(&self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = dims2("transpose2d", x)?;
        let data = transpose_raw(&x.data(), r, c);
        let out = Tensor::from_vec(vec![c, r], data, x.requires_grad());
        self.record(Op::Transpose2d, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn reshape(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", x.numel()),
                got: shape_str(&shape),
            });
        }
        let out = Tensor::from_vec(shape, x.to_vec(), x.requires_grad());
        self.record(Op::Reshape, vec![x.clone()], &out);
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&self, x: &Tensor) -> Tensor {
        let s: f64 = x.data().iter().sum();
        let out = Tensor::from_vec(vec![1], vec![s], x.requires_grad());
        self.record(Op::Sum, vec![x.clone()], &out);
        out
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(TensorError::Domain {
                op: "mean",
                what: "empty tensor".into(),
            });
        }
        let s: f64 = x.data().iter().sum();
        let out = Tensor::from_vec(vec![1], vec![s / x.numel() as f64], x.requires_grad());
        self.record(Op::Mean, vec![x.clone()], &out);
        Ok(out)
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = x.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::Domain {
                op: "mean_axis",
                what: format!("axis {axis} invalid for shape {:?}", shape),
            });
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let xd = x.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += xd[(o * len + a) * inner + i];
                }
            }
        }
        drop(xd);
        for v in &mut data {
            *v /= len as f64;
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::from_vec(out_shape, data, x.requires_grad());
        self.record(Op::MeanAxis(axis), vec![x.clone()], &out);
        Ok(out)
    }

    // ── nonlinearities ──────────────────────────────────────────────

    /// Softmax over the last axis of a rank-1 or rank-2 tensor.
    pub fn softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax on a square matrix where row `i` may only see
    /// columns `j <= i`; masked entries are exactly zero.
    pub fn softmax_rows_causal(&self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = dims2("softmax_rows_causal", x)?;
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_rows_causal",
                expected: "square matrix".into(),
                got: shape_str(x.shape()),
            });
        }
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&self, x: &Tensor, causal: bool) -> Result<Tensor> {
        let (rows, cols) = rows_cols("softmax", x)?;
        if cols == 0 {
            return Err(TensorError::Domain {
                op: "softmax",
                what: "empty axis".into(),
            });
        }
        let xd = x.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let valid = if causal { r + 1 } else { cols };
            let row = &xd[r * cols..r * cols + valid];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - m).exp();
                data[r * cols + j] = e;
                s += e;
            }
            for j in 0..valid {
                data[r * cols + j] /= s;
            }
        }
        drop(xd);
        let out = Tensor::from_vec(x.shape().to_vec(), data, x.requires_grad());
        self.record(Op::SoftmaxRows, vec![x.clone()], &out);
        Ok(out)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = rows_cols("log_softmax", x)?;
        if cols == 0 {
            return Err(TensorError::Domain {
                op: "log_softmax",
                what: "empty axis".into(),
            });
        }
        let xd = x.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            for j in 0..cols {
                data[r * cols + j] = row[j] - lse;
            }
        }
        drop(xd);
        let out = Tensor::from_vec(x.shape().to_vec(), data, x.requires_grad());
        self.record(Op::LogSoftmaxRows, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(TensorError::Domain {
                op: "log",
                what: "empty axis".into(),
            });
        }
        let data = x.data().iter().map(|v| v.ln()).collect();
        Ok(self.unary(Op::Log, x, data))
    }

    pub fn exp(&self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| v.exp()).collect();
        self.unary(Op::Exp, x, data)
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        self.unary(Op::Relu, x, data)
    }

    pub fn gelu(&self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| gelu_fwd(*v)).collect();
        self.unary(Op::Gelu, x, data)
    }

    // ── gather / slice / concat ─────────────────────────────────────

    /// Concatenate along `axis`. Rank-1 tensors support axis 0; rank-2
    /// support axes 0 and 1.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Domain {
                op: "concat",
                what: "no inputs".into(),
            });
        }
        let rank = parts[0].shape().len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(TensorError::BadRank {
                op: "concat",
                rank,
                shape: parts[0].shape().to_vec(),
            });
        }
        for p in parts {
            if p.shape().len() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: format!("rank {rank}"),
                    got: shape_str(p.shape()),
                });
            }
            for (d, (a, b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        expected: shape_str(parts[0].shape()),
                        got: shape_str(p.shape()),
                    });
                }
            }
        }
        let (data, out_shape) = if rank == 1 {
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(&p.data());
            }
            let n = data.len();
            (data, vec![n])
        } else if axis == 0 {
            let cols = parts[0].shape()[1];
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(&p.data());
            }
            let rows = data.len() / cols.max(1);
            (data, vec![rows, cols])
        } else {
            let rows = parts[0].shape()[0];
            let total_cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut data = vec![0.0; rows * total_cols];
            let mut col0 = 0;
            for p in parts {
                let pc = p.shape()[1];
                let pd = p.data();
                for r in 0..rows {
                    data[r * total_cols + col0..r * total_cols + col0 + pc]
                        .copy_from_slice(&pd[r * pc..(r + 1) * pc]);
                }
                col0 += pc;
            }
            (data, vec![rows, total_cols])
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        let out = Tensor::from_vec(out_shape, data, rg);
        self.record(
            Op::Concat { axis },
            parts.iter().map(|p| (*p).clone()).collect(),
            &out,
        );
        Ok(out)
    }

    pub fn slice_rows(&self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = dims2("slice_rows", x)?;
        if start > end || end > rows {
            return Err(TensorError::Domain {
                op: "slice_rows",
                what: format!("range {start}..{end} out of {rows} rows"),
            });
        }
        let data = x.data()[start * cols..end * cols].to_vec();
        let out = Tensor::from_vec(vec![end - start, cols], data, x.requires_grad());
        self.record(Op::SliceRows { start }, vec![x.clone()], &out);
        Ok(out)
    }

    pub fn slice_cols(&self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = dims2("slice_cols", x)?;
        if start > end || end > cols {
            return Err(TensorError::Domain {
                op: "slice_cols",
                what: format!("range {start}..{end} out of {cols} cols"),
            });
        }
        let xd = x.data();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&xd[r * cols + start..r * cols + end]);
        }
        drop(xd);
        let out = Tensor::from_vec(vec![rows, w], data, x.requires_grad());
        self.record(Op::SliceCols { start }, vec![x.clone()], &out);
        Ok(out)
    }

    /// Row lookup: `out[i] = table[ids[i]]`. Backward scatter-adds.
    pub fn gather_rows(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (rows, cols) = dims2("gather_rows", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                what: format!("index {bad} out of {rows} rows"),
            });
        }
        let td = table.data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&td[i * cols..(i + 1) * cols]);
        }
        drop(td);
        let out = Tensor::from_vec(vec![ids.len(), cols], data, table.requires_grad());
        self.record(
            Op::GatherRows { ids: ids.to_vec() },
            vec![table.clone()],
            &out,
        );
        Ok(out)
    }

    /// Select one column per row: `out[i] = x[i, ids[i]]`.
    pub fn pick_per_row(&self, x: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (rows, cols) = dims2("pick_per_row", x)?;
        if ids.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "pick_per_row",
                expected: format!("{rows} indices"),
                got: format!("{}", ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cols) {
            return Err(TensorError::Domain {
                op: "pick_per_row",
                what: format!("index {bad} out of {cols} cols"),
            });
        }
        let xd = x.data();
        let data: Vec<f64> = ids.iter().enumerate().map(|(r, &c)| xd[r * cols + c]).collect();
        drop(xd);
        let out = Tensor::from_vec(vec![rows], data, x.requires_grad());
        self.record(Op::PickPerRow { ids: ids.to_vec() }, vec![x.clone()], &out);
        Ok(out)
    }

    /// Select one element of a rank-1 tensor as a `[1]` tensor.
    pub fn pick(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        if x.shape().len() != 1 {
            return Err(TensorError::BadRank {
                op: "pick",
                rank: x.shape().len(),
                shape: x.shape().to_vec(),
            });
        }
        if index >= x.numel() {
            return Err(TensorError::Domain {
                op: "pick",
                what: format!("index {index} out of {}", x.numel()),
            });
        }
        let v = x.data()[index];
        let out = Tensor::from_vec(vec![1], vec![v], x.requires_grad());
        self.record(Op::Pick { index }, vec![x.clone()], &out);
        Ok(out)
    }

    // ── normalization ───────────────────────────────────────────────

    /// Layer normalization over the last axis with learnable gain/shift.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = rows_cols("layer_norm", x)?;
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                expected: format!("[{cols}]"),
                got: format!("{} / {}", shape_str(gamma.shape()), shape_str(beta.shape())),
            });
        }
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                data[r * cols + j] = (row[j] - mu) * rstd * gd[j] + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let out = Tensor::from_vec(x.shape().to_vec(), data, any_grad(&[x, gamma, beta]));
        self.record(
            Op::LayerNorm { eps },
            vec![x.clone(), gamma.clone(), beta.clone()],
            &out,
        );
        Ok(out)
    }

    // ── convolution support ─────────────────────────────────────────

    /// Unfold a (C, H, W) tensor into patch rows: output is
    /// (OH*OW, C*kh*kw) with valid (unpadded) windows.
    pub fn im2col(&self, x: &Tensor, kh: usize, kw: usize, sh: usize, sw: usize) -> Result<Tensor> {
        let (c, h, w) = dims3("im2col", x)?;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
            return Err(TensorError::Domain {
                op: "im2col",
                what: format!("kernel {kh}x{kw} stride {sh}x{sw} invalid for input {h}x{w}"),
            });
        }
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let ckk = c * kh * kw;
        let xd = x.data();
        let mut data = vec![0.0; oh * ow * ckk];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * ckk;
                for ch in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            data[row + ch * kh * kw + dy * kw + dx] =
                                xd[ch * h * w + (oy * sh + dy) * w + (ox * sw + dx)];
                        }
                    }
                }
            }
        }
        drop(xd);
        let out = Tensor::from_vec(vec![oh * ow, ckk], data, x.requires_grad());
        self.record(Op::Im2col { kh, kw, sh, sw }, vec![x.clone()], &out);
        Ok(out)
    }

    /// Non-overlapping-friendly average pooling on (C, H, W).
    pub fn avg_pool2d(&self, x: &Tensor, k: usize, s: usize) -> Result<Tensor> {
        let (c, h, w) = dims3("avg_pool2d", x)?;
        if k == 0 || s == 0 || k > h || k > w {
            return Err(TensorError::Domain {
                op: "avg_pool2d",
                what: format!("kernel {k} stride {s} invalid for input {h}x{w}"),
            });
        }
        let oh = (h - k) / s + 1;
        let ow = (w - k) / s + 1;
        let xd = x.data();
        let mut data = vec![0.0; c * oh * ow];
        let inv = 1.0 / (k * k) as f64;
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += xd[ch * h * w + (oy * s + dy) * w + (ox * s + dx)];
                        }
                    }
                    data[ch * oh * ow + oy * ow + ox] = acc * inv;
                }
            }
        }
        drop(xd);
        let out = Tensor::from_vec(vec![c, oh, ow], data, x.requires_grad());
        self.record(Op::AvgPool2d { k, s }, vec![x.clone()], &out);
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse traversal: seeds `d loss/d loss = 1`, visits every recorded
    /// node exactly once in reverse order, and accumulates gradients into
    /// each tensor with `requires_grad`. Consumes the tape.
    pub fn backward(self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        loss.accumulate_grad(&[1.0]);
        let nodes = self.nodes.into_inner();
        for node in nodes.iter().rev() {
            let dy = match node.output.grad() {
                Some(g) => g,
                None => continue, // not on any path to the loss
            };
            backprop_node(node, &dy);
        }
        Ok(())
    }
}

// ── shared math helpers ─────────────────────────────────────────────

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: shape_str(a.shape()),
            got: shape_str(b.shape()),
        });
    }
    Ok(())
}

fn dims2(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::BadRank {
            op,
            rank: s.len(),
            shape: s.to_vec(),
        }),
    }
}

fn dims3(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(TensorError::BadRank {
            op,
            rank: s.len(),
            shape: s.to_vec(),
        }),
    }
}

/// Treat rank-1 as a single row, rank-2 as rows x cols.
fn rows_cols(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::BadRank {
            op,
            rank: s.len(),
            shape: s.to_vec(),
        }),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data().iter()).map(|(x, y)| f(*x, *y)).collect()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a (m, k) times b^T where b is (n, k): rows of both operands are
/// contiguous, accumulated with four independent partial sums.
pub(crate) fn matmul_t_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let chunks = k / 4;
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for c in 0..chunks {
                let p = c * 4;
                s0 += arow[p] * brow[p];
                s1 += arow[p + 1] * brow[p + 1];
                s2 += arow[p + 2] * brow[p + 2];
                s3 += arow[p + 3] * brow[p + 3];
            }
            let mut s = (s0 + s1) + (s2 + s3);
            for p in chunks * 4..k {
                s += arow[p] * brow[p];
            }
            orow[j] = s;
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ── per-op backward rules ───────────────────────────────────────────

fn backprop_node(node: &Node, dy: &[f64]) {
    let ins = &node.inputs;
    let out = &node.output;
    match &node.op {
        Op::Add => {
            ins[0].accumulate_grad(dy);
            ins[1].accumulate_grad(dy);
        }
        Op::AddBias => {
            ins[0].accumulate_grad(dy);
            if ins[1].requires_grad() {
                let cols = ins[1].numel();
                let mut db = vec![0.0; cols];
                for (i, v) in dy.iter().enumerate() {
                    db[i % cols] += v;
                }
                ins[1].accumulate_grad(&db);
            }
        }
        Op::Sub => {
            ins[0].accumulate_grad(dy);
            if ins[1].requires_grad() {
                let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                ins[1].accumulate_grad(&neg);
            }
        }
        Op::Neg => {
            let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
            ins[0].accumulate_grad(&neg);
        }
        Op::Mul => {
            if ins[0].requires_grad() {
                let b = ins[1].data();
                let da: Vec<f64> = dy.iter().zip(b.iter()).map(|(d, v)| d * v).collect();
                drop(b);
                ins[0].accumulate_grad(&da);
            }
            if ins[1].requires_grad() {
                let a = ins[0].data();
                let db: Vec<f64> = dy.iter().zip(a.iter()).map(|(d, v)| d * v).collect();
                drop(a);
                ins[1].accumulate_grad(&db);
            }
        }
        Op::Scale(c) => {
            let dx: Vec<f64> = dy.iter().map(|v| v * c).collect();
            ins[0].accumulate_grad(&dx);
        }
        Op::AddConst => {
            ins[0].accumulate_grad(dy);
        }
        Op::MulScalarT => {
            let s = ins[1].data()[0];
            if ins[0].requires_grad() {
                let dx: Vec<f64> = dy.iter().map(|v| v * s).collect();
                ins[0].accumulate_grad(&dx);
            }
            if ins[1].requires_grad() {
                let x = ins[0].data();
                let ds: f64 = dy.iter().zip(x.iter()).map(|(d, v)| d * v).sum();
                drop(x);
                ins[1].accumulate_grad(&[ds]);
            }
        }
        Op::ScaleMiscalibrated(c) => {
            // Deliberately wrong: reports twice the true sensitivity.
            let dx: Vec<f64> = dy.iter().map(|v| v * 2.0 * c).collect();
            ins[0].accumulate_grad(&dx);
        }
        Op::Matmul => {
            let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
            let n = ins[1].shape()[1];
            if ins[0].requires_grad() {
                // dA = dY . B^T
                let b = ins[1].data();
                let bt = transpose_raw(&b, k, n);
                drop(b);
                let da = matmul_raw(dy, m, n, &bt, k);
                ins[0].accumulate_grad(&da);
            }
            if ins[1].requires_grad() {
                // dB = A^T . dY
                let a = ins[0].data();
                let at = transpose_raw(&a, m, k);
                drop(a);
                let db = matmul_raw(&at, k, m, dy, n);
                ins[1].accumulate_grad(&db);
            }
        }
        Op::MatmulT => {
            // out = A . B^T: dA = dY . B, dB = dY^T . A.
            let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
            let n = ins[1].shape()[0];
            if ins[0].requires_grad() {
                let b = ins[1].data();
                let da = matmul_raw(dy, m, n, &b, k);
                drop(b);
                ins[0].accumulate_grad(&da);
            }
            if ins[1].requires_grad() {
                let a = ins[0].data();
                let dyt = transpose_raw(dy, m, n);
                let db = matmul_raw(&dyt, n, m, &a, k);
                drop(a);
                ins[1].accumulate_grad(&db);
            }
        }
        Op::Transpose2d => {
            let (c, r) = (out.shape()[0], out.shape()[1]);
            ins[0].accumulate_grad(&transpose_raw(dy, c, r));
        }
        Op::Reshape => {
            ins[0].accumulate_grad(dy);
        }
        Op::Sum => {
            let dx = vec![dy[0]; ins[0].numel()];
            ins[0].accumulate_grad(&dx);
        }
        Op::Mean => {
            let dx = vec![dy[0] / ins[0].numel() as f64; ins[0].numel()];
            ins[0].accumulate_grad(&dx);
        }
        Op::MeanAxis(axis) => {
            let shape = ins[0].shape();
            let (outer, len, inner) = axis_split(shape, *axis);
            let mut dx = vec![0.0; ins[0].numel()];
            let inv = 1.0 / len as f64;
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        dx[(o * len + a) * inner + i] = dy[o * inner + i] * inv;
                    }
                }
            }
            ins[0].accumulate_grad(&dx);
        }
        Op::SoftmaxRows => {
            // dx = y * (dy - sum(dy * y)) per row; masked entries have y = 0.
            let y = out.to_vec();
            let (rows, cols) = match out.shape() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => unreachable!(),
            };
            let mut dx = vec![0.0; y.len()];
            for r in 0..rows {
                let o = r * cols;
                let dot: f64 = (0..cols).map(|j| dy[o + j] * y[o + j]).sum();
                for j in 0..cols {
                    dx[o + j] = y[o + j] * (dy[o + j] - dot);
                }
            }
            ins[0].accumulate_grad(&dx);
        }
        Op::LogSoftmaxRows => {
            // dx = dy - softmax(x) * sum(dy) per row.
            let y = out.to_vec();
            let (rows, cols) = match out.shape() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => unreachable!(),
            };
            let mut dx = vec![0.0; y.len()];
            for r in 0..rows {
                let o = r * cols;
                let s: f64 = (0..cols).map(|j| dy[o + j]).sum();
                for j in 0..cols {
                    dx[o + j] = dy[o + j] - y[o + j].exp() * s;
                }
            }
            ins[0].accumulate_grad(&dx);
        }
        Op::Log => {
            let x = ins[0].data();
            let dx: Vec<f64> = dy.iter().zip(x.iter()).map(|(d, v)| d / v).collect();
            drop(x);
            ins[0].accumulate_grad(&dx);
        }
        Op::Exp => {
            let y = out.data();
            let dx: Vec<f64> = dy.iter().zip(y.iter()).map(|(d, v)| d * v).collect();
            drop(y);
            ins[0].accumulate_grad(&dx);
        }
        Op::Relu => {
            let x = ins[0].data();
            let dx: Vec<f64> = dy
                .iter()
                .zip(x.iter())
                .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                .collect();
            drop(x);
            ins[0].accumulate_grad(&dx);
        }
        Op::Gelu => {
            let x = ins[0].data();
            let dx: Vec<f64> = dy.iter().zip(x.iter()).map(|(d, v)| d * gelu_bwd(*v)).collect();
            drop(x);
            ins[0].accumulate_grad(&dx);
        }
        Op::Concat { axis } => {
            if ins[0].shape().len() == 1 || *axis == 0 {
                let mut offset = 0;
                for p in ins {
                    let n = p.numel();
                    if p.requires_grad() {
                        p.accumulate_grad(&dy[offset..offset + n]);
                    }
                    offset += n;
                }
            } else {
                let rows = out.shape()[0];
                let total_cols = out.shape()[1];
                let mut col0 = 0;
                for p in ins {
                    let pc = p.shape()[1];
                    if p.requires_grad() {
                        let mut dp = vec![0.0; rows * pc];
                        for r in 0..rows {
                            dp[r * pc..(r + 1) * pc].copy_from_slice(
                                &dy[r * total_cols + col0..r * total_cols + col0 + pc],
                            );
                        }
                        p.accumulate_grad(&dp);
                    }
                    col0 += pc;
                }
            }
        }
        Op::SliceRows { start } => {
            let cols = ins[0].shape()[1];
            let mut dx = vec![0.0; ins[0].numel()];
            dx[start * cols..start * cols + dy.len()].copy_from_slice(dy);
            ins[0].accumulate_grad(&dx);
        }
        Op::SliceCols { start } => {
            let (rows, cols) = (ins[0].shape()[0], ins[0].shape()[1]);
            let w = out.shape()[1];
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + w]
                    .copy_from_slice(&dy[r * w..(r + 1) * w]);
            }
            ins[0].accumulate_grad(&dx);
        }
        Op::GatherRows { ids } => {
            let cols = ins[0].shape()[1];
            let mut dt = vec![0.0; ins[0].numel()];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..cols {
                    dt[i * cols + j] += dy[r * cols + j];
                }
            }
            ins[0].accumulate_grad(&dt);
        }
        Op::PickPerRow { ids } => {
            let cols = ins[0].shape()[1];
            let mut dx = vec![0.0; ins[0].numel()];
            for (r, &c) in ids.iter().enumerate() {
                dx[r * cols + c] += dy[r];
            }
            ins[0].accumulate_grad(&dx);
        }
        Op::Pick { index } => {
            let mut dx = vec![0.0; ins[0].numel()];
            dx[*index] += dy[0];
            ins[0].accumulate_grad(&dx);
        }
        Op::LayerNorm { eps } => {
            let (rows, cols) = match ins[0].shape() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => unreachable!(),
            };
            let x = ins[0].data();
            let gamma = ins[1].data();
            let d = cols as f64;
            let mut dx = vec![0.0; x.len()];
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for r in 0..rows {
                let o = r * cols;
                let row = &x[o..o + cols];
                let mu = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                let rstd = 1.0 / (var + eps).sqrt();
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..cols {
                    let xhat = (row[j] - mu) * rstd;
                    let dxhat = dy[o + j] * gamma[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[j] += dy[o + j] * xhat;
                    dbeta[j] += dy[o + j];
                }
                for j in 0..cols {
                    let xhat = (row[j] - mu) * rstd;
                    let dxhat = dy[o + j] * gamma[j];
                    dx[o + j] = rstd * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                }
            }
            drop(x);
            drop(gamma);
            ins[0].accumulate_grad(&dx);
            if ins[1].requires_grad() {
                ins[1].accumulate_grad(&dgamma);
            }
            if ins[2].requires_grad() {
                ins[2].accumulate_grad(&dbeta);
            }
        }
        Op::Im2col { kh, kw, sh, sw } => {
            let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
            let oh = (h - kh) / sh + 1;
            let ow = (w - kw) / sw + 1;
            let ckk = c * kh * kw;
            let mut dx = vec![0.0; ins[0].numel()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (oy * ow + ox) * ckk;
                    for ch in 0..c {
                        for dyk in 0..*kh {
                            for dxk in 0..*kw {
                                dx[ch * h * w + (oy * sh + dyk) * w + (ox * sw + dxk)] +=
                                    dy[row + ch * kh * kw + dyk * kw + dxk];
                            }
                        }
                    }
                }
            }
            ins[0].accumulate_grad(&dx);
        }
        Op::AvgPool2d { k, s } => {
            let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
            let oh = (h - k) / s + 1;
            let ow = (w - k) / s + 1;
            let inv = 1.0 / (k * k) as f64;
            let mut dx = vec![0.0; ins[0].numel()];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dy[ch * oh * ow + oy * ow + ox] * inv;
                        for dyk in 0..*k {
                            for dxk in 0..*k {
                                dx[ch * h * w + (oy * s + dyk) * w + (ox * s + dxk)] += g;
                            }
                        }
                    }
                }
            }
            ins[0].accumulate_grad(&dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gradcheck, Tensor};
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data, true)
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::new();
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false);
        let x = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.matmul(&eye, &x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn softmax_symmetry() {
        let tape = Tape::new();
        let x = t(vec![2], vec![0.0, 0.0]);
        let y = tape.softmax_rows(&x).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn sum_hand_arithmetic() {
        // Oracle: 1.5 - 0.5 + 2.0 = 3.0 by hand.
        let tape = Tape::new();
        let x = t(vec![3], vec![1.5, -0.5, 2.0]);
        assert_eq!(tape.sum(&x).item(), 3.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = t(vec![2, 3], vec![0.3; 6]);
        let loss = tape.sum(&x);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_square_matches_analytic() {
        // d(x*x)/dx = 2x = 6 at x = 3.
        let tape = Tape::new();
        let x = t(vec![1], vec![3.0]);
        let y = tape.mul(&x, &x).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn softmax_grad_rows_sum_to_zero() {
        let tape = Tape::new();
        let x = t(vec![2, 4], vec![0.3, -1.2, 0.7, 0.1, 2.0, 0.0, -0.4, 1.1]);
        let p = tape.softmax_rows(&x).unwrap();
        let loss = tape.mean(&p).unwrap();
        tape.backward(&loss).unwrap();
        let g = x.grad().unwrap();
        for r in 0..2 {
            let s: f64 = g[r * 4..(r + 1) * 4].iter().sum();
            assert!(s.abs() < 1e-14, "row {r} grad sum {s}");
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = t(vec![2], vec![1.0, 2.0]);
        let y = tape.scale(&x, 2.0);
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn branch_reuse_accumulates() {
        // x used in two branches: grad = sum of per-branch grads.
        let tape = Tape::new();
        let x = t(vec![2], vec![1.0, 2.0]);
        let a = tape.scale(&x, 3.0);
        let b = tape.mul(&x, &x).unwrap();
        let s = tape.add(&a, &b).unwrap();
        let loss = tape.sum(&s);
        tape.backward(&loss).unwrap();
        // d/dx (3x + x^2) = 3 + 2x
        assert_eq!(x.grad().unwrap(), vec![5.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let tape = Tape::new();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn softmax_empty_axis_domain_error() {
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![0], vec![], true);
        assert!(tape.softmax_rows(&x).is_err());
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let tape = Tape::new();
            let x = t(vec![3, 3], vec![0.17, -0.9, 1.3, 0.02, 0.5, -2.1, 0.0, 0.77, -0.3]);
            let w = t(vec![3, 3], vec![0.5, -0.25, 0.125, 1.0, -1.0, 0.75, 0.3, 0.6, -0.9]);
            let h = tape.gelu(&tape.matmul(&x, &w).unwrap());
            let p = tape.softmax_rows(&h).unwrap();
            let loss = tape.mean(&p).unwrap();
            tape.backward(&loss).unwrap();
            (loss.item(), x.grad().unwrap(), w.grad().unwrap())
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn gradcheck_sum_exact() {
        // Dyadic values and a power-of-two eps keep every sum exactly
        // representable, so the central difference is exact.
        let x = Tensor::from_vec(vec![2, 2], vec![0.5, -1.0, 0.25, 2.0], true);
        let err = gradcheck(|tape, x| Ok(tape.sum(x)), &x, 2f64.powi(-20)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gradcheck_detects_wrong_backward() {
        let x = Tensor::from_vec(vec![3], vec![0.5, -0.2, 1.4], true);
        let err = gradcheck(
            |tape, x| {
                let y = tape.scale_miscalibrated(x, 1.5);
                Ok(tape.sum(&y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "negative control not detected: {err}");
    }
}
