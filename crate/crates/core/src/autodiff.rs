//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of a forward pass together with the
//! values it produced. [`Graph::backward`] walks the record in reverse,
//! applying a hand-derived adjoint per operation, and returns gradients for
//! every parameter leaf. The record is consumed by `backward`; a second call
//! without a fresh forward pass is an error.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × c` row to every row.
    AddRow(Var, Var),
    /// Adds a `1 × 1` value to every entry.
    AddScalar(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
        allowed: Vec<bool>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    /// Columns `cols[j]` of `base` replaced by column `j` of `repl`.
    ReplaceCols {
        base: Var,
        repl: Var,
        cols: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Parameter gradients indexed like the parameter list passed to the graph.
pub type ParamGrads = Vec<Matrix>;

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.consumed = false;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    /// A leaf bound to parameter slot `index`.
    pub fn param(&mut self, index: usize, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let r = r.row(0).to_vec();
        let mut v = self.value(x).clone();
        assert_eq!(v.cols(), r.len(), "add_row width");
        for i in 0..v.rows() {
            for (a, b) in v.row_mut(i).iter_mut().zip(&r) {
                *a += b;
            }
        }
        self.push(v, Op::AddRow(x, row))
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "add_scalar expects 1x1");
        let sv = sv.get(0, 0);
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|a| *a += sv);
        self.push(v, Op::AddScalar(x, s))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&z| gelu(z)).collect();
        let v = Matrix::from_vec(src.rows(), src.cols(), data);
        self.push(v, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|z| z.tanh()).collect();
        let v = Matrix::from_vec(src.rows(), src.cols(), data);
        self.push(v, Op::Tanh(x))
    }

    /// Row-wise layer normalization with learned `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let (h, is) = normalize_row(src.row(r));
            inv_std.push(is);
            xhat.row_mut(r).copy_from_slice(&h);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = h[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row softmax restricted to `allowed` entries (row-major, same shape as
    /// `x`). Disallowed entries get probability 0. Every row needs at least
    /// one allowed entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: Vec<bool>) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        assert_eq!(allowed.len(), rows * cols, "mask shape");
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mask = &allowed[r * cols..(r + 1) * cols];
            softmax_masked_into(src.row(r), mask, out.row_mut(r));
        }
        self.push(out, Op::MaskedSoftmax { x, allowed })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        assert!(start + len <= src.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            out.row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows cols");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let src = self.value(x);
        let mut out = Matrix::zeros(idx.len(), src.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(src.row(i));
        }
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn replace_cols(&mut self, base: Var, repl: Var, cols: &[usize]) -> Var {
        let b = self.value(base);
        let r = self.value(repl);
        assert_eq!(b.rows(), r.rows(), "replace_cols rows");
        assert_eq!(r.cols(), cols.len(), "replace_cols width");
        let mut out = b.clone();
        for row in 0..out.rows() {
            for (j, &c) in cols.iter().enumerate() {
                out.set(row, c, r.get(row, j));
            }
        }
        self.push(
            out,
            Op::ReplaceCols {
                base,
                repl,
                cols: cols.to_vec(),
            },
        )
    }

    /// Reverse sweep. `seeds` are upstream gradients for chosen output nodes;
    /// `param_shapes` sizes the returned gradient list.
    pub fn backward(
        &mut self,
        seeds: Vec<(Var, Matrix)>,
        param_shapes: &[(usize, usize)],
    ) -> Result<ParamGrads> {
        if self.consumed || self.nodes.is_empty() {
            return Err(Error::NoForwardRecorded);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "seed shape");
            accumulate(&mut grads, v, g);
        }
        let mut out: ParamGrads = param_shapes
            .iter()
            .map(|&(r, c)| Matrix::zeros(r, c))
            .collect();

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => out[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *x, g);
                }
                Op::AddScalar(x, s) => {
                    let total: f64 = g.data().iter().sum();
                    accumulate(&mut grads, *s, Matrix::from_vec(1, 1, vec![total]));
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.scale(*s)),
                Op::Gelu(x) => {
                    let src = self.value(*x);
                    let data = src
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&z, &d)| d * gelu_grad(z))
                        .collect();
                    accumulate(&mut grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::Tanh(x) => {
                    let out = &node.value;
                    let data = out
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&t, &d)| d * (1.0 - t * t))
                        .collect();
                    accumulate(&mut grads, *x, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).row(0).to_vec();
                    let (rows, cols) = g.shape();
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut dh = vec![0.0; cols];
                        for c in 0..cols {
                            dg.row_mut(0)[c] += gr[c] * hr[c];
                            db.row_mut(0)[c] += gr[c];
                            dh[c] = gr[c] * gv[c];
                        }
                        let n = cols as f64;
                        let mean_dh = dh.iter().sum::<f64>() / n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    accumulate(&mut grads, *gain, dg);
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskedSoftmax { x, allowed } => {
                    let p = &node.value;
                    let (rows, cols) = p.shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            if allowed[r * cols + c] {
                                *o = pr[c] * (gr[c] - inner);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (h, w) = self.value(*p).shape();
                        let dp = Matrix::from_vec(h, w, g.data()[off * w..(off + h) * w].to_vec());
                        off += h;
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::GatherRows { x, idx } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for (o, &i) in idx.iter().enumerate() {
                        for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(o)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ReplaceCols { base, repl, cols } => {
                    let mut db = g.clone();
                    let mut dr = Matrix::zeros(g.rows(), cols.len());
                    for r in 0..g.rows() {
                        for (j, &c) in cols.iter().enumerate() {
                            dr.set(r, j, g.get(r, c));
                            db.set(r, c, 0.0);
                        }
                    }
                    accumulate(&mut grads, *repl, dr);
                    accumulate(&mut grads, *base, db);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

#[inline]
pub fn gelu_grad(z: f64) -> f64 {
    let u = GELU_C * (z + 0.044715 * z * z * z);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
}

/// Returns the normalized row and `1/σ`.
pub fn normalize_row(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

/// Layer norm of one row with gain and bias, outside of any graph.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let (h, _) = normalize_row(x);
    h.iter()
        .zip(gain)
        .zip(bias)
        .map(|((h, g), b)| h * g + b)
        .collect()
}

pub fn softmax_masked_into(x: &[f64], allowed: &[bool], out: &mut [f64]) {
    let max = x
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(max.is_finite(), "softmax row without allowed entries");
    let mut total = 0.0;
    for ((o, &v), &a) in out.iter_mut().zip(x).zip(allowed) {
        *o = if a { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
