//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value
//! and whatever it needs for the backward pass. Node indices are therefore a
//! topological order, and [`Graph::backward`] walks them in exact reverse.
//!
//! Binary ops broadcast only along leading dimensions: the smaller operand's
//! shape must be a suffix of the larger one's.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm, gemm_a_bt, gemm_at_b};
use crate::ssm::scan::{self, ScanSaved};
use crate::tensor::{c, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sigmoid,
    Silu,
    Gelu,
    Softplus,
    Neg,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Softplus => "softplus",
            Unary::Neg => "neg",
            Unary::Square => "square",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Scale(Var, T),
    Unary(Unary, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    RmsNorm {
        x: Var,
        w: Var,
        rinv: Vec<T>,
    },
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    SelectiveScan {
        inputs: [Var; 6],
        saved: ScanSaved<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Mse(Var, Var),
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape. Single-threaded; one graph per forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose leaves never require grad. Used for inference.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape));
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Unary(_, x)
            | Op::Softmax { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Gather { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::RmsNorm { x, w, .. } => vec![*x, *w],
            Op::LayerNorm { x, w, b, .. } | Op::CausalConv { x, w, b } => vec![*x, *w, *b],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::SelectiveScan { inputs, .. } => inputs.to_vec(),
        }
    }

    // ---------------------------------------------------------------------
    // Leaves and accessors
    // ---------------------------------------------------------------------

    fn leaf_node(&mut self, t: &Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push("leaf", t.data().to_vec(), t.shape().to_vec(), Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad && self.grad_enabled;
        Ok(v)
    }

    /// Inserts a tensor as a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.leaf_node(t, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.leaf_node(t, false)
    }

    /// Inserts a named parameter once per graph; later calls with the same
    /// name return the same node, so tied weights share one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(t)?;
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.param_var(name).and_then(|v| self.grad(v))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}] @ [{k2}×{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n, false);
        self.push("matmul", out, vec![m, n], Op::MatMul(a, b))
    }

    /// `x · w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = if is_suffix(&sb, &sa) {
            sa.clone()
        } else if is_suffix(&sa, &sb) {
            sb.clone()
        } else {
            return Err(Error::shape(
                "broadcast",
                format!("{sa:?} and {sb:?} differ beyond leading dims"),
            ));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (va.len(), vb.len());
        let n = numel(&out_shape);
        let out: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (va[i % na], vb[i % nb]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        self.push(name, out, out_shape, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", out, shape, Op::Scale(x, s))
    }

    // ---------------------------------------------------------------------
    // Pointwise
    // ---------------------------------------------------------------------

    pub fn unary(&mut self, f: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if f == Unary::Log {
            if let Some(bad) = xv.iter().find(|v| **v <= T::zero()) {
                return Err(Error::InvalidArgument(format!("log of non-positive value {bad}")));
            }
        }
        let out = xv
            .iter()
            .map(|&v| match f {
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sigmoid => kernels::sigmoid(v),
                Unary::Silu => kernels::silu(v),
                Unary::Gelu => kernels::gelu(v),
                Unary::Softplus => kernels::softplus(v),
                Unary::Neg => -v,
                Unary::Square => v * v,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(f.name(), out, shape, Op::Unary(f, x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    // ---------------------------------------------------------------------
    // Normalisation
    // ---------------------------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        self.push("softmax", out, shape, Op::Softmax { x, axis })
    }

    /// RMS normalisation over the last dimension with a learned gain.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("rms_norm", "scalar input"))?;
        if self.shape(w) != [d] {
            return Err(Error::shape(
                "rms_norm",
                format!("weight {:?} vs last dim {d}", self.shape(w)),
            ));
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); xv.len()];
        let rinv: Vec<T> = xv
            .chunks(d)
            .zip(out.chunks_mut(d))
            .map(|(row, o)| kernels::rms_norm_row(row, wv, c(eps), o))
            .collect();
        self.push("rms_norm", out, shape, Op::RmsNorm { x, w, rinv })
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, w: Var, b: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(w) != [d] || self.shape(b) != [d] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{d}]")));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![T::zero(); xv.len()];
        let rows = xv.len() / d;
        let (mut mean, mut rstd) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        let dn = c::<T>(d as f64);
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let r = T::one() / (var + c(eps)).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mu) * r * wv[j] + bv[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
        self.push("layer_norm", out, shape, Op::LayerNorm { x, w, b, mean, rstd })
    }

    // ---------------------------------------------------------------------
    // Reductions and reshaping
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![s], vec![], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / c(v.len() as f64);
        self.push("mean", vec![s], vec![], Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", out, shape, Op::Reshape(x))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if numel(&shape) != index.len() {
            return Err(Error::shape("gather", "index length does not match output shape"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of bounds {}", xv.len()),
            ));
        }
        let out = index.iter().map(|&i| xv[i]).collect();
        self.push("gather", out, shape, Op::Gather { x, index })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", x)?;
        let index = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.gather(x, index, vec![n, m])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        self.gather(x, (start * n..end * n).collect(), vec![end - start, n])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n} cols")));
        }
        let w = end - start;
        let index = (0..m).flat_map(|i| (start..end).map(move |j| i * n + j)).collect();
        self.gather(x, index, vec![m, w])
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!("token id {bad} >= vocab size {v}")));
        }
        let index = ids.iter().flat_map(|&t| t * d..(t + 1) * d).collect();
        self.gather(table, index, vec![ids.len(), d])
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let (_, n) = self.dims2("concat_rows", xs[0])?;
        let mut out = Vec::new();
        let mut m = 0;
        for &x in xs {
            let (r, cols) = self.dims2("concat_rows", x)?;
            if cols != n {
                return Err(Error::shape("concat_rows", format!("column counts {n} vs {cols}")));
            }
            out.extend_from_slice(self.value(x));
            m += r;
        }
        self.push("concat_rows", out, vec![m, n], Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let (m, _) = self.dims2("concat_cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, w) = self.dims2("concat_cols", x)?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(w);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", out, vec![m, n], Op::ConcatCols(xs.to_vec()))
    }

    // ---------------------------------------------------------------------
    // Sequence ops
    // ---------------------------------------------------------------------

    /// Depthwise causal convolution: `x[L×C]`, `w[C×K]`, `b[C]`; left
    /// zero-padding only, so `y[t]` sees `x[t-K+1..=t]`.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, ch) = self.dims2("causal_conv", x)?;
        let (wc, k) = self.dims2("causal_conv", w)?;
        if wc != ch || self.shape(b) != [ch] {
            return Err(Error::shape("causal_conv", format!("x [{l}×{ch}], w [{wc}×{k}]")));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![T::zero(); l * ch];
        for t in 0..l {
            for cc in 0..ch {
                let mut s = bv[cc];
                for j in 0..k {
                    let src = t + j;
                    if src + 1 >= k {
                        s += wv[cc * k + j] * xv[(src + 1 - k) * ch + cc];
                    }
                }
                out[t * ch + cc] = s;
            }
        }
        self.push("causal_conv", out, vec![l, ch], Op::CausalConv { x, w, b })
    }

    /// Input-dependent diagonal SSM scan; see [`crate::ssm::scan`].
    ///
    /// Shapes: `x, delta: [L×D]`, `a: [D×N]`, `b, c: [L×N]`, `d: [D]`.
    /// `h0` is an optional constant initial state of length `D·N`.
    /// Returns the output `[L×D]` and the final state.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        cm: Var,
        d: Var,
        h0: Option<&[T]>,
    ) -> Result<(Var, Vec<T>)> {
        let (l, dd) = self.dims2("selective_scan", x)?;
        let (da, n) = self.dims2("selective_scan", a)?;
        if self.shape(delta) != [l, dd]
            || da != dd
            || self.shape(b) != [l, n]
            || self.shape(cm) != [l, n]
            || self.shape(d) != [dd]
        {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "x {:?} delta {:?} a {:?} b {:?} c {:?} d {:?}",
                    self.shape(x),
                    self.shape(delta),
                    self.shape(a),
                    self.shape(b),
                    self.shape(cm),
                    self.shape(d)
                ),
            ));
        }
        if let Some(h) = h0 {
            if h.len() != dd * n {
                return Err(Error::shape("selective_scan", "initial state size"));
            }
        }
        let dims = scan::ScanDims {
            len: l,
            channels: dd,
            state: n,
        };
        let (y, saved) = scan::forward(
            dims,
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(cm),
            self.value(d),
            h0,
        )?;
        let last = saved.final_state().to_vec();
        let v = self.push(
            "selective_scan",
            y,
            vec![l, dd],
            Op::SelectiveScan {
                inputs: [x, delta, a, b, cm, d],
                saved,
            },
        )?;
        Ok((v, last))
    }

    // ---------------------------------------------------------------------
    // Losses
    // ---------------------------------------------------------------------

    /// Mean negative log-likelihood over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::InvalidArgument("cross_entropy with an empty mask".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!("target {bad} >= vocab {v}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            probs[i * v..(i + 1) * v].iter_mut().for_each(|p| *p /= sum);
            total += sum.ln() + max - row[t];
        }
        let loss = total / c(count as f64);
        self.push(
            "cross_entropy",
            vec![loss],
            vec![],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let s = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / c(va.len() as f64);
        self.push("mse", vec![s], vec![], Op::Mse(a, b))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.requires_grad {
            return Err(Error::NoGradPath);
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        // Returns the gradient buffer for `v`, or None if `v` needs no grad.
        fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        match &mut self.leaf_grads[i] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        gemm_a_bt(&g, &nodes[b.0].value, ga, m, n, k);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gemm_at_b(&nodes[a.0].value, &g, gb, m, k, n);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (na, nb) = (va.len(), vb.len());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (j, &gj) in g.iter().enumerate() {
                            ga[j % na] += match kind {
                                Binary::Add | Binary::Sub => gj,
                                Binary::Mul => gj * vb[j % nb],
                            };
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for (j, &gj) in g.iter().enumerate() {
                            gb[j % nb] += match kind {
                                Binary::Add => gj,
                                Binary::Sub => -gj,
                                Binary::Mul => gj * va[j % na],
                            };
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(a, &b)| *a += b * *s);
                    }
                }
                Op::Unary(f, x) => {
                    let (xv, yv) = (&nodes[x.0].value, &node.value);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for j in 0..g.len() {
                            let (xj, yj) = (xv[j], yv[j]);
                            let d = match f {
                                Unary::Exp => yj,
                                Unary::Log => T::one() / xj,
                                Unary::Sigmoid => yj * (T::one() - yj),
                                Unary::Silu => kernels::silu_grad(xj),
                                Unary::Gelu => kernels::gelu_grad(xj),
                                Unary::Softplus => kernels::sigmoid(xj),
                                Unary::Neg => -T::one(),
                                Unary::Square => xj + xj,
                            };
                            gx[j] += g[j] * d;
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = split_axis(&node.shape, *axis);
                    let y = &node.value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let idx = |j: usize| (o * len + j) * inner + ii;
                                let dot = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum::<T>();
                                for j in 0..len {
                                    gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::RmsNorm { x, w, rinv } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let d = wv.len();
                    let dn = c::<T>(d as f64);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, &ri) in rinv.iter().enumerate() {
                            let row = &xv[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let dot = (0..d).map(|j| gr[j] * wv[j] * row[j]).sum::<T>();
                            let k = dot * ri * ri * ri / dn;
                            for j in 0..d {
                                gx[r * d + j] += gr[j] * wv[j] * ri - row[j] * k;
                            }
                        }
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        for (r, &ri) in rinv.iter().enumerate() {
                            for j in 0..d {
                                gw[j] += g[r * d + j] * xv[r * d + j] * ri;
                            }
                        }
                    }
                }
                Op::LayerNorm { x, w, b, mean, rstd } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let d = wv.len();
                    let dn = c::<T>(d as f64);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for r in 0..mean.len() {
                            let (mu, rs) = (mean[r], rstd[r]);
                            let xh = |j: usize| (xv[r * d + j] - mu) * rs;
                            let gh = |j: usize| g[r * d + j] * wv[j];
                            let s1 = (0..d).map(gh).sum::<T>();
                            let s2 = (0..d).map(|j| gh(j) * xh(j)).sum::<T>();
                            for j in 0..d {
                                gx[r * d + j] += rs * (gh(j) - s1 / dn - xh(j) * s2 / dn);
                            }
                        }
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        for r in 0..mean.len() {
                            for j in 0..d {
                                gw[j] += g[r * d + j] * (xv[r * d + j] - mean[r]) * rstd[r];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for r in 0..mean.len() {
                            for j in 0..d {
                                gb[j] += g[r * d + j];
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|a| *a += g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let s = g[0] / c(gx.len() as f64);
                        gx.iter_mut().for_each(|a| *a += s);
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                    }
                }
                Op::Gather { x, index } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (&src, &gj) in index.iter().zip(&g) {
                            gx[src] += gj;
                        }
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let len = nodes[x.0].value.len();
                        if let Some(gx) = slot(&mut grads, nodes, x) {
                            gx.iter_mut().zip(&g[off..off + len]).for_each(|(a, &b)| *a += b);
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(xs) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let mut col = 0;
                    for &x in xs {
                        let w = nodes[x.0].shape[1];
                        if let Some(gx) = slot(&mut grads, nodes, x) {
                            for r in 0..m {
                                for j in 0..w {
                                    gx[r * w + j] += g[r * n + col + j];
                                }
                            }
                        }
                        col += w;
                    }
                }
                Op::CausalConv { x, w, b } => {
                    let (l, ch) = (node.shape[0], node.shape[1]);
                    let k = nodes[w.0].shape[1];
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for t in 0..l {
                            for cc in 0..ch {
                                let gt = g[t * ch + cc];
                                for j in 0..k {
                                    if t + j + 1 >= k {
                                        gx[(t + j + 1 - k) * ch + cc] += gt * wv[cc * k + j];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        for t in 0..l {
                            for cc in 0..ch {
                                let gt = g[t * ch + cc];
                                for j in 0..k {
                                    if t + j + 1 >= k {
                                        gw[cc * k + j] += gt * xv[(t + j + 1 - k) * ch + cc];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for t in 0..l {
                            for cc in 0..ch {
                                gb[cc] += g[t * ch + cc];
                            }
                        }
                    }
                }
                Op::SelectiveScan { inputs, saved } => {
                    let [x, delta, a, b, cm, d] = *inputs;
                    let sg = scan::backward(
                        saved,
                        &g,
                        &nodes[x.0].value,
                        &nodes[delta.0].value,
                        &nodes[a.0].value,
                        &nodes[b.0].value,
                        &nodes[cm.0].value,
                        &nodes[d.0].value,
                    );
                    for (v, part) in [
                        (x, sg.x),
                        (delta, sg.delta),
                        (a, sg.a),
                        (b, sg.b),
                        (cm, sg.c),
                        (d, sg.d),
                    ] {
                        if let Some(gv) = slot(&mut grads, nodes, v) {
                            gv.iter_mut().zip(&part).for_each(|(p, &q)| *p += q);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let v = nodes[logits.0].shape[1];
                    let s = g[0] / c(*count as f64);
                    if let Some(gl) = slot(&mut grads, nodes, *logits) {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for j in 0..v {
                                gl[r * v + j] += probs[r * v + j] * s;
                            }
                            gl[r * v + t] -= s;
                        }
                    }
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let s = (g[0] + g[0]) / c(va.len() as f64);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..va.len() {
                            ga[j] += s * (va[j] - vb[j]);
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for j in 0..va.len() {
                            gb[j] -= s * (va[j] - vb[j]);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}
