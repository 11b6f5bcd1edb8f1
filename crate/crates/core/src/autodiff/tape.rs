//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep. Every value is a
//! row-major matrix; scalars are 1x1.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gemm, View, ViewMut};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulRow(usize, usize),
    Scale(usize, usize),
    ScalarMul(usize, f64),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Gelu { x: usize, deriv: Vec<f64> },
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Slice { x: usize, r0: usize, c0: usize },
    Sum(usize),
    Mean(usize),
    Gather { inputs: Vec<usize>, index: Vec<(u32, u32)> },
    L2NormalizeRows { x: usize, inv_norm: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, segments: Vec<(usize, usize)>, heads: usize, probs: Vec<f64> },
    /// Loss whose derivative with respect to its single input was computed
    /// during the forward pass (the fused objectives).
    Fused { x: usize, coef: FusedGrad },
}

/// Cached derivative of a fused scalar op.
#[derive(Debug)]
pub(crate) enum FusedGrad {
    /// d out / d x, elementwise.
    Elementwise(Vec<f64>),
    /// d out / d X = M X for a symmetric `rows x rows` matrix M.
    Quadratic(Vec<f64>),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub op: Op,
    pub needs_grad: bool,
}

pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    shared: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every differentiable leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<(usize, Vec<f64>)>,
    names: Vec<(String, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves
            .binary_search_by_key(&v.idx, |(i, _)| *i)
            .ok()
            .map(|p| self.leaves[p].1.as_slice())
    }

    pub fn by_name(&self, name: &str) -> Option<&[f64]> {
        let idx = self.names.iter().find(|(n, _)| n == name)?.1;
        self.wrt(Var {
            tape: self.tape,
            idx,
        })
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names.iter().map(move |(n, idx)| {
            let p = self
                .leaves
                .binary_search_by_key(idx, |(i, _)| *i)
                .expect("registered parameters always have gradients");
            (n.as_str(), self.leaves[p].1.as_slice())
        })
    }
}

/// Output of [`Tape::grad_per_task`]: one flattened shared-parameter gradient
/// per task (registration order), plus each task's full gradient mapping.
#[derive(Clone, Debug)]
pub struct TaskGradients {
    pub shared: Vec<Vec<f64>>,
    pub full: Vec<Gradients>,
}

fn shape_err(op: &'static str, msg: String) -> Error {
    Error::structure(op, msg)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            shared: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::structure("tape", "variable belongs to a different tape"));
        }
        Ok(v.idx)
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Record a leaf. Differentiable iff the tensor was marked `with_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Leaf, false)
    }

    /// Record a named trainable parameter that belongs to the shared set.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        self.param_with(name, t, true)
    }

    /// Record a named trainable parameter; `shared` places it in the set
    /// whose per-task gradients are flattened by [`Tape::grad_per_task`].
    pub fn param_with(&mut self, name: &str, t: &Tensor, shared: bool) -> Var {
        let (r, c) = t.dims2();
        let v = self.push(r, c, t.data().to_vec(), Op::Leaf, true);
        self.params.push((name.to_string(), v.idx));
        self.shared.push(shared);
        v
    }

    /// Total number of scalars in the shared parameter set.
    pub fn shared_len(&self) -> usize {
        self.params
            .iter()
            .zip(&self.shared)
            .filter(|(_, &s)| s)
            .map(|((_, i), _)| self.nodes[*i].value.len())
            .sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        let n = &self.nodes[v.idx];
        (n.rows, n.cols)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.idx];
        assert_eq!(n.value.len(), 1, "not a scalar");
        n.value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (na, nb) = (&self.nodes[ia], &self.nodes[ib]);
        if na.cols != nb.rows {
            return Err(shape_err(
                "matmul",
                format!("({}x{}) * ({}x{})", na.rows, na.cols, nb.rows, nb.cols),
            ));
        }
        let (m, n) = (na.rows, nb.cols);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::dense(&na.value, na.rows, na.cols),
            View::dense(&nb.value, nb.rows, nb.cols),
            0.0,
            ViewMut::dense(&mut out, m, n),
        );
        let g = na.needs_grad || nb.needs_grad;
        Ok(self.push(m, n, out, Op::MatMul(ia, ib), g))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        if (na.rows, na.cols) != (nb.rows, nb.cols) {
            return Err(shape_err(
                op,
                format!("({}x{}) vs ({}x{})", na.rows, na.cols, nb.rows, nb.cols),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(op, ia, ib)?;
        let (na, nb) = (&self.nodes[ia], &self.nodes[ib]);
        let out: Vec<f64> = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let (r, c, g) = (na.rows, na.cols, na.needs_grad || nb.needs_grad);
        Ok(self.push(r, c, out, mk(ia, ib), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn row_broadcast(&mut self, op: &'static str, x: Var, row: Var, f: impl Fn(f64, f64) -> f64, mk: fn(usize, usize) -> Op) -> Result<Var> {
        let (ix, ir) = (self.idx(x)?, self.idx(row)?);
        let (nx, nr) = (&self.nodes[ix], &self.nodes[ir]);
        if nr.rows != 1 || nr.cols != nx.cols {
            return Err(shape_err(
                op,
                format!("({}x{}) with row ({}x{})", nx.rows, nx.cols, nr.rows, nr.cols),
            ));
        }
        let c = nx.cols;
        let out: Vec<f64> = nx
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, nr.value[i % c.max(1)]))
            .collect();
        let (r, g) = (nx.rows, nx.needs_grad || nr.needs_grad);
        Ok(self.push(r, c, out, mk(ix, ir), g))
    }

    /// `x + b` with `b` a single row added to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, bias, |a, b| a + b, Op::AddRow)
    }

    /// `x * g` with `g` a single row multiplied into every row of `x`.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, gain, |a, b| a * b, Op::MulRow)
    }

    /// `x * s` for a 1x1 node `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x)?, self.idx(s)?);
        let (nx, ns) = (&self.nodes[ix], &self.nodes[is]);
        if ns.value.len() != 1 {
            return Err(shape_err("scale", format!("factor is {}x{}, expected 1x1", ns.rows, ns.cols)));
        }
        let k = ns.value[0];
        let out = nx.value.iter().map(|v| v * k).collect();
        let (r, c, g) = (nx.rows, nx.cols, nx.needs_grad || ns.needs_grad);
        Ok(self.push(r, c, out, Op::Scale(ix, is), g))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, mk: fn(usize) -> Op) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let out = n.value.iter().map(|&v| f(v)).collect();
        let (r, c, g) = (n.rows, n.cols, n.needs_grad);
        Ok(self.push(r, c, out, mk(ix), g))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let out = n.value.iter().map(|v| v * c).collect();
        let (r, cc, g) = (n.rows, n.cols, n.needs_grad);
        Ok(self.push(r, cc, out, Op::ScalarMul(ix, c), g))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let (out, deriv): (Vec<f64>, Vec<f64>) = n.value.iter().map(|&v| gelu_with_grad(v)).unzip();
        let (r, c, g) = (n.rows, n.cols, n.needs_grad);
        Ok(self.push(r, c, out, Op::Gelu { x: ix, deriv }, g))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let mut out = n.value.clone();
        for row in out.chunks_mut(n.cols.max(1)) {
            softmax_in_place(row);
        }
        let (r, c, g) = (n.rows, n.cols, n.needs_grad);
        Ok(self.push(r, c, out, Op::Softmax(ix), g))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let c = n.cols;
        if c == 0 {
            return Err(shape_err("layer_norm", "zero-width rows".into()));
        }
        let mut out = n.value.clone();
        let mut inv_std = Vec::with_capacity(n.rows);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let (r, g) = (n.rows, n.needs_grad);
        Ok(self.push(r, c, out, Op::LayerNorm { x: ix, inv_std }, g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let c = self.nodes[first].cols;
        if let Some(&bad) = idx.iter().find(|&&i| self.nodes[i].cols != c) {
            return Err(shape_err(
                "concat_rows",
                format!("column counts {} and {}", c, self.nodes[bad].cols),
            ));
        }
        let rows = idx.iter().map(|&i| self.nodes[i].rows).sum();
        let mut out = Vec::with_capacity(rows * c);
        for &i in &idx {
            out.extend_from_slice(&self.nodes[i].value);
        }
        let g = idx.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(rows, c, out, Op::ConcatRows(idx), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(shape_err("concat_cols", "no inputs".into()));
        };
        let r = self.nodes[first].rows;
        if let Some(&bad) = idx.iter().find(|&&i| self.nodes[i].rows != r) {
            return Err(shape_err(
                "concat_cols",
                format!("row counts {} and {}", r, self.nodes[bad].rows),
            ));
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].cols).sum();
        let mut out = Vec::with_capacity(r * cols);
        for row in 0..r {
            for &i in &idx {
                let n = &self.nodes[i];
                out.extend_from_slice(&n.value[row * n.cols..(row + 1) * n.cols]);
            }
        }
        let g = idx.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(r, cols, out, Op::ConcatCols(idx), g))
    }

    /// Rectangular block `rows x cols` starting at (`r0`, `c0`).
    pub fn slice(&mut self, x: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        if r0 + rows > n.rows || c0 + cols > n.cols {
            return Err(shape_err(
                "slice",
                format!("block ({r0}+{rows}, {c0}+{cols}) outside ({}x{})", n.rows, n.cols),
            ));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            out.extend_from_slice(&n.value[r * n.cols + c0..r * n.cols + c0 + cols]);
        }
        let g = n.needs_grad;
        Ok(self.push(rows, cols, out, Op::Slice { x: ix, r0, c0 }, g))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let s = n.value.iter().sum();
        let g = n.needs_grad;
        Ok(self.push(1, 1, vec![s], Op::Sum(ix), g))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        if n.value.is_empty() {
            return Err(shape_err("mean", "empty input".into()));
        }
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let g = n.needs_grad;
        Ok(self.push(1, 1, vec![s], Op::Mean(ix), g))
    }

    /// Build a matrix whose row `r` is row `index[r].1` of `sources[index[r].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        let idx: Vec<usize> = sources.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(shape_err("gather_rows", "no sources".into()));
        };
        let c = self.nodes[first].cols;
        if let Some(&bad) = idx.iter().find(|&&i| self.nodes[i].cols != c) {
            return Err(shape_err(
                "gather_rows",
                format!("source widths {} and {}", c, self.nodes[bad].cols),
            ));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        let mut packed = Vec::with_capacity(index.len());
        for &(s, r) in index {
            let Some(&src) = idx.get(s) else {
                return Err(shape_err("gather_rows", format!("source {s} out of range")));
            };
            let n = &self.nodes[src];
            if r >= n.rows {
                return Err(shape_err("gather_rows", format!("row {r} outside source of {} rows", n.rows)));
            }
            out.extend_from_slice(&n.value[r * c..(r + 1) * c]);
            packed.push((s as u32, r as u32));
        }
        let g = idx.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push(index.len(), c, out, Op::Gather { inputs: idx, index: packed }, g))
    }

    /// Scale each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let c = n.cols.max(1);
        let mut out = n.value.clone();
        let mut inv_norm = Vec::with_capacity(n.rows);
        for row in out.chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            let inv = 1.0 / norm;
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norm.push(inv);
        }
        let (r, cc, g) = (n.rows, n.cols, n.needs_grad);
        Ok(self.push(r, cc, out, Op::L2NormalizeRows { x: ix, inv_norm }, g))
    }

    /// Multi-head scaled dot-product self-attention applied independently to
    /// each row segment `(start, len)`; every token in a segment attends to
    /// every token of the same segment.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        self.same_shape("attention", iq, ik)?;
        self.same_shape("attention", iq, iv)?;
        let (rows, d) = (self.nodes[iq].rows, self.nodes[iq].cols);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let mut cursor = 0;
        for &(s, l) in segments {
            if s != cursor {
                return Err(shape_err("attention", "segments must tile the rows in order".into()));
            }
            cursor = s + l;
        }
        if cursor != rows {
            return Err(shape_err(
                "attention",
                format!("segments cover {cursor} of {rows} rows"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = segments.iter().map(|&(_, l)| l * l).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; rows * d];
        {
            let (qv, kv, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
            let mut off = 0;
            for &(s, l) in segments {
                if l == 0 {
                    continue;
                }
                for h in 0..heads {
                    let p = &mut probs[off..off + l * l];
                    let qb = View::dense(qv, rows, d).block(s, h * dh, l, dh);
                    let kb = View::dense(kv, rows, d).block(s, h * dh, l, dh);
                    let vb = View::dense(vv, rows, d).block(s, h * dh, l, dh);
                    gemm(scale, qb, kb.t(), 0.0, ViewMut::dense(p, l, l));
                    for row in p.chunks_mut(l) {
                        softmax_in_place(row);
                    }
                    gemm(
                        1.0,
                        View::dense(p, l, l),
                        vb,
                        0.0,
                        ViewMut::dense(&mut out, rows, d).block(s, h * dh, l, dh),
                    );
                    off += l * l;
                }
            }
        }
        let g = self.nodes[iq].needs_grad || self.nodes[ik].needs_grad || self.nodes[iv].needs_grad;
        Ok(self.push(
            rows,
            d,
            out,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            g,
        ))
    }

    /// Record a scalar produced outside the tape whose derivative with
    /// respect to `x` is already known.
    pub(crate) fn fused_scalar(&mut self, x: Var, value: f64, coef: FusedGrad) -> Result<Var> {
        let ix = self.idx(x)?;
        let n = &self.nodes[ix];
        let expected = match &coef {
            FusedGrad::Elementwise(c) => c.len() == n.value.len(),
            FusedGrad::Quadratic(m) => m.len() == n.rows * n.rows,
        };
        if !expected {
            return Err(shape_err("fused", "derivative cache does not match input".into()));
        }
        let g = n.needs_grad;
        Ok(self.push(1, 1, vec![value], Op::Fused { x: ix, coef }, g))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar. Differentiable leaves that the loss does
    /// not reach get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            let n = &self.nodes[li];
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got ({}x{})", n.rows, n.cols),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        if self.nodes[li].needs_grad {
            grads[li] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, g));
            } else {
                self.backward_node(i, &g, &mut grads);
            }
        }
        leaf_grads.reverse();
        // Zero-fill differentiable leaves the loss did not reach.
        let mut all = Vec::new();
        let mut it = leaf_grads.into_iter().peekable();
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.needs_grad) {
                continue;
            }
            match it.peek() {
                Some((j, _)) if *j == i => all.push(it.next().unwrap()),
                _ => all.push((i, vec![0.0; n.value.len()])),
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves: all,
            names: self.params.clone(),
        })
    }

    /// One independent backward pass per loss. Passes share nothing, so the
    /// result cannot depend on evaluation order or thread scheduling.
    pub fn grad_per_task(&self, losses: &[Var]) -> Result<TaskGradients> {
        for &l in losses {
            self.idx(l)?;
        }
        let full: Vec<Gradients> = par::map_indexed(losses.len(), |t| self.backward(losses[t]))
            .into_iter()
            .collect::<Result<_>>()?;
        let shared = full
            .iter()
            .map(|g| {
                let mut flat = Vec::with_capacity(self.shared_len());
                for ((_, idx), &sh) in self.params.iter().zip(&self.shared) {
                    if sh {
                        flat.extend_from_slice(g.wrt(Var { tape: self.id, idx: *idx }).unwrap());
                    }
                }
                flat
            })
            .collect();
        Ok(TaskGradients { shared, full })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], j: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[j].needs_grad {
            return None;
        }
        let len = self.nodes[j].value.len();
        Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], j: usize, f: impl Fn(usize) -> f64) {
        if !self.nodes[j].needs_grad {
            return;
        }
        match &mut grads[j] {
            Some(s) => {
                for (i, v) in s.iter_mut().enumerate() {
                    *v += f(i);
                }
            }
            None => grads[j] = Some((0..self.nodes[j].value.len()).map(f).collect()),
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (na, nb) = (&self.nodes[a], &self.nodes[b]);
                if let Some(s) = self.slot(grads, a) {
                    gemm(
                        1.0,
                        View::dense(g, rows, cols),
                        View::dense(&nb.value, nb.rows, nb.cols).t(),
                        1.0,
                        ViewMut::dense(s, na.rows, na.cols),
                    );
                }
                if let Some(s) = self.slot(grads, b) {
                    gemm(
                        1.0,
                        View::dense(&na.value, na.rows, na.cols).t(),
                        View::dense(g, rows, cols),
                        1.0,
                        ViewMut::dense(s, nb.rows, nb.cols),
                    );
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |k| g[k]);
                self.acc(grads, b, |k| g[k]);
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |k| g[k]);
                self.acc(grads, b, |k| -g[k]);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                self.acc(grads, a, |k| g[k] * vb[k]);
                self.acc(grads, b, |k| g[k] * va[k]);
            }
            &Op::AddRow(x, bias) => {
                self.acc(grads, x, |k| g[k]);
                if let Some(s) = self.slot(grads, bias) {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += g[r * cols + c];
                        }
                    }
                }
            }
            &Op::MulRow(x, gain) => {
                let (vx, vg) = (&self.nodes[x].value, &self.nodes[gain].value);
                self.acc(grads, x, |k| g[k] * vg[k % cols]);
                if let Some(s) = self.slot(grads, gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += g[r * cols + c] * vx[r * cols + c];
                        }
                    }
                }
            }
            &Op::Scale(x, sc) => {
                let (vx, k) = (&self.nodes[x].value, self.nodes[sc].value[0]);
                self.acc(grads, x, |j| g[j] * k);
                if let Some(s) = self.slot(grads, sc) {
                    s[0] += g.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            &Op::ScalarMul(x, c) => self.acc(grads, x, |k| g[k] * c),
            &Op::Tanh(x) => self.acc(grads, x, |k| g[k] * (1.0 - y[k] * y[k])),
            &Op::Sigmoid(x) => self.acc(grads, x, |k| g[k] * y[k] * (1.0 - y[k])),
            &Op::Exp(x) => self.acc(grads, x, |k| g[k] * y[k]),
            &Op::Log(x) => {
                let vx = &self.nodes[x].value;
                self.acc(grads, x, |k| g[k] / vx[k]);
            }
            Op::Gelu { x, deriv } => self.acc(grads, *x, |k| g[k] * deriv[k]),
            &Op::Softmax(x) => {
                if let Some(s) = self.slot(grads, x) {
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            s[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if let Some(s) = self.slot(grads, *x) {
                    let n = cols as f64;
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..cols {
                            s[r * cols + c] += inv_std[r] * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.acc(grads, p, |k| g[off + k]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    self.acc(grads, p, |k| g[(k / pc) * cols + c0 + k % pc]);
                    c0 += pc;
                }
            }
            &Op::Slice { x, r0, c0 } => {
                let xc = self.nodes[x].cols;
                if let Some(s) = self.slot(grads, x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[(r0 + r) * xc + c0 + c] += g[r * cols + c];
                        }
                    }
                }
            }
            &Op::Sum(x) => self.acc(grads, x, |_| g[0]),
            &Op::Mean(x) => {
                let n = self.nodes[x].value.len() as f64;
                self.acc(grads, x, |_| g[0] / n);
            }
            Op::Gather { inputs, index } => {
                for (r, &(src, row)) in index.iter().enumerate() {
                    let (src, row) = (inputs[src as usize], row as usize);
                    if let Some(s) = self.slot(grads, src) {
                        let dst = &mut s[row * cols..(row + 1) * cols];
                        for (d, v) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, inv_norm } => {
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            s[r * cols + c] += inv_norm[r] * (gr[c] - yr[c] * dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                self.attention_backward(g, rows, cols, (*q, *k, *v), segments, *heads, probs, grads);
            }
            Op::Fused { x, coef } => {
                let up = g[0];
                match coef {
                    FusedGrad::Elementwise(c) => self.acc(grads, *x, |k| up * c[k]),
                    FusedGrad::Quadratic(m) => {
                        let nx = &self.nodes[*x];
                        if let Some(s) = self.slot(grads, *x) {
                            gemm(
                                up,
                                View::dense(m, nx.rows, nx.rows),
                                View::dense(&nx.value, nx.rows, nx.cols),
                                1.0,
                                ViewMut::dense(s, nx.rows, nx.cols),
                            );
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        rows: usize,
        d: usize,
        (iq, ik, iv): (usize, usize, usize),
        segments: &[(usize, usize)],
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        let (need_q, need_k, need_v) = (
            self.nodes[iq].needs_grad,
            self.nodes[ik].needs_grad,
            self.nodes[iv].needs_grad,
        );
        let mut dq = vec![0.0; if need_q { rows * d } else { 0 }];
        let mut dk = vec![0.0; if need_k { rows * d } else { 0 }];
        let mut dv = vec![0.0; if need_v { rows * d } else { 0 }];
        let max_l = segments.iter().map(|&(_, l)| l).max().unwrap_or(0);
        let mut ds = vec![0.0; max_l * max_l];
        let mut off = 0;
        for &(s, l) in segments {
            if l == 0 {
                continue;
            }
            for h in 0..heads {
                let p = &probs[off..off + l * l];
                off += l * l;
                let gb = View::dense(g, rows, d).block(s, h * dh, l, dh);
                if need_v {
                    gemm(
                        1.0,
                        View::dense(p, l, l).t(),
                        gb,
                        1.0,
                        ViewMut::dense(&mut dv, rows, d).block(s, h * dh, l, dh),
                    );
                }
                if !(need_q || need_k) {
                    continue;
                }
                let dsb = &mut ds[..l * l];
                let vb = View::dense(vv, rows, d).block(s, h * dh, l, dh);
                gemm(1.0, gb, vb.t(), 0.0, ViewMut::dense(dsb, l, l));
                for r in 0..l {
                    let pr = &p[r * l..(r + 1) * l];
                    let dr = &mut dsb[r * l..(r + 1) * l];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..l {
                        dr[c] = pr[c] * (dr[c] - dot);
                    }
                }
                if need_q {
                    let kb = View::dense(kv, rows, d).block(s, h * dh, l, dh);
                    gemm(
                        scale,
                        View::dense(dsb, l, l),
                        kb,
                        1.0,
                        ViewMut::dense(&mut dq, rows, d).block(s, h * dh, l, dh),
                    );
                }
                if need_k {
                    let qb = View::dense(qv, rows, d).block(s, h * dh, l, dh);
                    gemm(
                        scale,
                        View::dense(dsb, l, l).t(),
                        qb,
                        1.0,
                        ViewMut::dense(&mut dk, rows, d).block(s, h * dh, l, dh),
                    );
                }
            }
        }
        if need_q {
            self.acc(grads, iq, |j| dq[j]);
        }
        if need_k {
            self.acc(grads, ik, |j| dk[j]);
        }
        if need_v {
            self.acc(grads, iv, |j| dv[j]);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    gelu_with_grad(x).0
}

/// `tanh` through one `exp`; absolute error stays near machine epsilon.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// `(gelu(x), gelu'(x))` from one tanh evaluation.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = fast_tanh(GELU_C * (x + 0.044715 * x * x * x));
    let y = 0.5 * x * (1.0 + t);
    (y, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
