use std::collections::HashMap;

use super::kernels::{self, gemm, gemm_strided};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Powf {
        a: Var,
        e: f64,
    },
    ClampMin {
        a: Var,
        min: f64,
    },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    PickPerRow {
        x: Var,
        idx: Vec<usize>,
    },
    Select {
        a: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Stack(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Dot {
        a: Var,
        w: Vec<f64>,
    },
    Outer {
        u: Var,
        v: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Powf { .. } => "powf",
            Op::ClampMin { .. } => "clamp_min",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalAttention { .. } => "causal_attention",
            Op::GatherRows { .. } => "gather",
            Op::PickPerRow { .. } => "pick",
            Op::Select { .. } => "select",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::Stack(..) => "stack",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dot { .. } => "dot",
            Op::Outer { .. } => "outer",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every grad-requiring leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Append-only record of a forward computation.
///
/// Node order is a topological order, so backward is a single reverse sweep.
/// A tape supports exactly one backward pass; call [`Tape::clear`] to reuse
/// its allocation for the next step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(shape_err(
                op,
                format!("expected a matrix, got {:?}", t.shape()),
            ));
        }
        Ok((t.rows(), t.cols()))
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` is set.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!(
                    "inner dimensions differ: {:?} x {:?}{}",
                    self.value(a).shape(),
                    self.value(b).shape(),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        let (rsb, csb) = if trans_b { (1, bc) } else { (bc, 1) };
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            rsb,
            csb,
            &mut out,
            0.0,
        );
        self.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMul { a, b, trans_b },
            &[a, b],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).len() != c {
            return Err(shape_err(
                "add_row",
                format!("row of {} for {c} columns", self.value(row).len()),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += r[i % c];
        }
        self.push(t, Op::AddRow { a, row }, &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale { a, c }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let t = self.map(a, f64::ln);
        self.push(t, Op::Log(a), &[a])
    }

    /// `a^e` for non-negative `a`.
    pub fn powf(&mut self, a: Var, e: f64) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "powf",
                detail: format!("negative base {bad}"),
            });
        }
        let t = self.map(a, |x| x.powf(e));
        self.push(t, Op::Powf { a, e }, &[a])
    }

    /// `max(a, min)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var> {
        let t = self.map(a, |x| x.max(min));
        self.push(t, Op::ClampMin { a, min }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, kernels::gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        let c = t.cols();
        if c > 0 {
            for row in t.data_mut().chunks_mut(c) {
                kernels::softmax_row(row);
            }
        }
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        let c = t.cols();
        if c > 0 {
            for row in t.data_mut().chunks_mut(c) {
                kernels::log_softmax_row(row);
            }
        }
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err(
                "layer_norm",
                "gain/bias length differs from last axis",
            ));
        }
        let g = self.value(gain).data();
        let zero = vec![0.0; c];
        let one = vec![1.0; c];
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let xi = &tx.data()[i * c..(i + 1) * c];
            let (_, s) = kernels::layer_norm_row(xi, &one, &zero, &mut xhat[i * c..(i + 1) * c]);
            rstd[i] = s;
            let b = self.value(bias).data();
            for j in 0..c {
                out[i * c + j] = xhat[i * c + j] * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Multi-head causal self-attention on `T × d` query/key/value matrices.
    ///
    /// Query row `i` attends to key rows `0..=i`. Scores are scaled by
    /// `1/sqrt(d/heads)`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(q, "causal_attention")?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] {
            return Err(shape_err("causal_attention", "q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "causal_attention",
                format!("{d} columns not divisible into {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for h in 0..heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            // S = Q_h K_hᵀ
            gemm(t, dh, t, &qd[h * dh..], d, 1, &kd[h * dh..], 1, d, p, 0.0);
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                for s in row[..=i].iter_mut() {
                    *s *= scale;
                }
                kernels::softmax_row(&mut row[..=i]);
                for s in row[i + 1..].iter_mut() {
                    *s = 0.0;
                }
            }
            gemm_strided(
                t,
                t,
                dh,
                p,
                t,
                1,
                &vd[h * dh..],
                d,
                1,
                &mut out[h * dh..],
                d,
                0.0,
            );
        }
        let out = Tensor::matrix(t, d, out)?;
        self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table).select_rows(ids).map_err(|e| match e {
            Error::IndexOutOfRange { index, bound, .. } => Error::IndexOutOfRange {
                op: "gather",
                index,
                bound,
            },
            other => other,
        })?;
        self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if idx.len() != r {
            return Err(shape_err(
                "pick",
                format!("{} indices for {r} rows", idx.len()),
            ));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    bound: c,
                });
            }
            out.push(tx.data()[i * c + j]);
        }
        self.push(
            Tensor::vector(out),
            Op::PickPerRow {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Flat-index selection into a vector.
    pub fn select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= ta.len() {
                return Err(Error::IndexOutOfRange {
                    op: "select",
                    index: i,
                    bound: ta.len(),
                });
            }
            out.push(ta.data()[i]);
        }
        self.push(
            Tensor::vector(out),
            Op::Select {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if start > end || end > r {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{end} of {r} rows"),
            ));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        self.push(
            Tensor::matrix(end - start, c, data)?,
            Op::SliceRows { a, start },
            &[a],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = vals.first().map_or(0, |t| t.cols());
        if vals
            .iter()
            .any(|t| t.shape().len() != 2 || t.cols() != cols)
        {
            return Err(shape_err(
                "concat_rows",
                "parts must be matrices with equal columns",
            ));
        }
        let t = Tensor::concat_rows(&vals)?;
        let t = if t.shape().len() != 2 {
            Tensor::matrix(0, cols, vec![])?
        } else {
            t
        };
        self.push(t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Packs scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            out.push(self.value(s).item()?);
        }
        self.push(Tensor::vector(out), Op::Stack(scalars.to_vec()), scalars)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean of empty tensor".into()));
        }
        let s = self.value(a).sum() / n as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `Σ a_i w_i` with constant weights.
    pub fn dot_const(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        if self.value(a).len() != w.len() {
            return Err(shape_err("dot", "weight length differs"));
        }
        let s = self.value(a).data().iter().zip(w).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot { a, w: w.to_vec() }, &[a])
    }

    /// `u vᵀ` as a `|u| × |v|` matrix.
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let mut out = Vec::with_capacity(ud.len() * vd.len());
        for &a in ud {
            out.extend(vd.iter().map(|&b| a * b));
        }
        let t = Tensor::matrix(ud.len(), vd.len(), out)?;
        self.push(t, Op::Outer { u, v }, &[u, v])
    }

    /// Reverse sweep from a scalar `root`. Consumes the tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.grads.insert(Var(id), t);
                    continue;
                }
                op => self.backprop_op(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_op(
        &self,
        op: &Op,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, trans_b } => {
                let ta = self.value(a);
                let tb = self.value(b);
                let (m, k) = (ta.rows(), ta.cols());
                let n = out.cols();
                let bc = tb.cols();
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC · Bᵀ (or dC · B when C = A Bᵀ)
                    let (rsb, csb) = if trans_b { (bc, 1) } else { (1, bc) };
                    gemm(m, n, k, g, n, 1, tb.data(), rsb, csb, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, b) {
                    if trans_b {
                        // dB = dCᵀ · A   (n × k)
                        gemm(n, m, k, g, 1, n, ta.data(), k, 1, gb, 1.0);
                    } else {
                        // dB = Aᵀ · dC   (k × n)
                        gemm(k, m, n, ta.data(), 1, k, g, n, 1, gb, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, b) {
                    axpy(gb, g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gi), &bv) in ga.iter_mut().zip(g).zip(self.value(b).data()) {
                        *x += gi * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((x, &gi), &av) in gb.iter_mut().zip(g).zip(self.value(a).data()) {
                        *x += gi * av;
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, 1.0);
                }
                let c = out.cols();
                if let Some(gr) = self.acc(grads, row) {
                    for (i, &gi) in g.iter().enumerate() {
                        gr[i % c] += gi;
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, c);
                }
            }
            &Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    axpy(ga, g, 1.0);
                }
            }
            &Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * y;
                    }
                }
            }
            &Op::Log(a) => {
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gi), &xa) in ga.iter_mut().zip(g).zip(av) {
                        *x += gi / xa;
                    }
                }
            }
            &Op::Powf { a, e } => {
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gi), &base) in ga.iter_mut().zip(g).zip(av) {
                        let d = if e == 0.0 {
                            0.0
                        } else if base == 0.0 {
                            if e > 1.0 {
                                0.0
                            } else if e == 1.0 {
                                1.0
                            } else {
                                return Err(Error::NonFinite { op: "powf" });
                            }
                        } else {
                            e * base.powf(e - 1.0)
                        };
                        *x += gi * d;
                    }
                }
            }
            &Op::ClampMin { a, min } => {
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gi), &xa) in ga.iter_mut().zip(g).zip(av) {
                        if xa >= min {
                            *x += gi;
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &gi), &xa) in ga.iter_mut().zip(g).zip(av) {
                        *x += gi * kernels::gelu_grad(xa);
                    }
                }
            }
            &Op::Softmax(a) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, a) {
                    for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, a) {
                    for ((gx, gy), y) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let s: f64 = gy.iter().sum();
                        for j in 0..c {
                            gx[j] += gy[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let r = out.rows();
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                let gain_v = self.value(*gain).data().to_vec();
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gain_v[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::GatherRows { table, ids } => {
                let c = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * c..(id + 1) * c], &g[i * c..(i + 1) * c], 1.0);
                    }
                }
            }
            Op::PickPerRow { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &j) in idx.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                }
            }
            Op::Select { a, idx } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (gi, &i) in g.iter().zip(idx) {
                        ga[i] += gi;
                    }
                }
            }
            &Op::SliceRows { a, start } => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, a) {
                    axpy(&mut ga[start * c..start * c + g.len()], g, 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        axpy(gp, &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.acc(grads, p) {
                        gp[0] += g[i];
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Dot { a, w } => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, w, g[0]);
                }
            }
            &Op::Outer { u, v } => {
                let (ud, vd) = (self.value(u).data(), self.value(v).data());
                let n = vd.len();
                if let Some(gu) = self.acc(grads, u) {
                    for (i, x) in gu.iter_mut().enumerate() {
                        *x += g[i * n..(i + 1) * n]
                            .iter()
                            .zip(vd)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if let Some(gv) = self.acc(grads, v) {
                    for (i, &a) in ud.iter().enumerate() {
                        axpy(gv, &g[i * n..(i + 1) * n], a);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let tq = self.value(q);
        let (t, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), self.value(k).data(), self.value(v).data());
        let mut dp = vec![0.0; t * t];
        for h in 0..heads {
            let p = &probs[h * t * t..(h + 1) * t * t];
            let go = &g[h * dh..];
            if let Some(gv) = self.acc(grads, v) {
                // dV_h = Pᵀ dO_h
                gemm_strided(t, t, dh, p, 1, t, go, d, 1, &mut gv[h * dh..], d, 1.0);
            }
            // dP = dO_h V_hᵀ
            gemm(t, dh, t, go, d, 1, &vd[h * dh..], 1, d, &mut dp, 0.0);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then the score scale
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                for x in dr[i + 1..].iter_mut() {
                    *x = 0.0;
                }
            }
            if let Some(gq) = self.acc(grads, q) {
                gemm_strided(
                    t,
                    t,
                    dh,
                    &dp,
                    t,
                    1,
                    &kd[h * dh..],
                    d,
                    1,
                    &mut gq[h * dh..],
                    d,
                    1.0,
                );
            }
            if let Some(gk) = self.acc(grads, k) {
                gemm_strided(
                    t,
                    t,
                    dh,
                    &dp,
                    1,
                    t,
                    &qd[h * dh..],
                    d,
                    1,
                    &mut gk[h * dh..],
                    d,
                    1.0,
                );
            }
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
