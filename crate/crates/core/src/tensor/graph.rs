//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! whatever the backward rule needs. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and [`Graph::backward`] walks
//! it once in reverse. Parameters are borrowed from a [`ParamStore`] rather than
//! copied; their gradients are accumulated per [`ParamId`], which is what lets
//! several forwards recorded on one graph share parameters.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, AttnDims, MatRef};
use super::Tensor;
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::{Error, Real, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Square,
    Sqrt,
    Exp,
    Log,
    Relu,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Unary(Unary, Var),
    Scale(Var, Real),
    AddConst(Var),
    SumAll(Var),
    SumAxis {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    MaxLast {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        width: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    Transpose(Var),
    Reshape(Var),
    SoftmaxLast(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<Real>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    RmsNorm {
        x: Var,
        group: usize,
        inv: Vec<Real>,
    },
    Rope {
        x: Var,
        d_head: usize,
        positions: Vec<usize>,
        base: Real,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<Real>,
        dims: AttnDims,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. See the module documentation.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph without parameters; leaves come from [`Graph::leaf`] and
    /// [`Graph::constant`].
    pub fn new() -> Self {
        Graph {
            store: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            param_vars: vec![None; store.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> Option<&'p ParamStore> {
        self.store
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("graph was created without a parameter store");
        assert!(id.index() < store.len(), "unknown parameter");
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("parameter store").tensor(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (out_shape, map_a, map_b) = if sa == sb {
            (sa, None, None)
        } else if let Some(m) = kernels::broadcast_map(&sa, &sb) {
            (sa, None, Some(m))
        } else if let Some(m) = kernels::broadcast_map(&sb, &sa) {
            (sb, Some(m), None)
        } else {
            return Err(mismatch(name, &sa, &sb));
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
        let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (av[ia(i)], bv[ib(i)]);
            out.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            });
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            rg,
        ))
    }

    /// Elementwise sum; the smaller operand is broadcast along leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xt = self.value(x);
        match kind {
            Unary::Sqrt | Unary::Log => {
                if let Some(&bad) = xt.data().iter().find(|v| **v < 0.0) {
                    let op = if matches!(kind, Unary::Sqrt) { "sqrt" } else { "log" };
                    return Err(Error::Domain { op, value: bad });
                }
            }
            _ => {}
        }
        let f = |v: Real| match kind {
            Unary::Neg => -v,
            Unary::Sigmoid => math::sigmoid(v),
            Unary::Tanh => math::tanh(v),
            Unary::Square => v * v,
            Unary::Sqrt => math::sqrt(v),
            Unary::Exp => math::exp(v),
            Unary::Log => math::ln(v),
            Unary::Relu => v.max(0.0),
        };
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Unary(kind, x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    /// Errors on negative entries.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    /// Errors on negative entries.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: Real) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::AddConst(x), rg)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as Real)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("sum_axis", &shape, &[axis]));
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &xd[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, outer, mid, inner }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| mismatch("mean_axis", &[], &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as Real))
    }

    /// Maximum over the last axis; the gradient goes to the first maximizer.
    pub fn max_last(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let cols = xt.cols();
        let mut out = Vec::with_capacity(xt.rows());
        let mut argmax = Vec::with_capacity(xt.rows());
        for r in 0..xt.rows() {
            let row = xt.row(r);
            let (mut bi, mut bv) = (0, Real::NEG_INFINITY);
            for (i, &v) in row.iter().enumerate() {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            argmax.push(r * cols + bi);
            out.push(bv);
        }
        let mut shape = xt.shape()[..xt.rank().saturating_sub(1)].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        let t = Tensor::new(shape, out).expect("row count");
        self.push(t, Op::MaxLast { x, argmax }, rg)
    }

    // ---- shape ---------------------------------------------------------

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::ShapeMismatch {
                op: "concat",
                lhs: Vec::new(),
                rhs: Vec::new(),
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &first, &[axis]));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(mismatch("concat", &first, s));
            }
            let (_, mid, inner) = split_axis(s, axis);
            widths.push(mid * inner);
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(mismatch("slice", &shape, &[axis, start, end]));
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * mid * inner + start * inner;
            out.extend_from_slice(&xd[base..base + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice {
                x,
                outer,
                width: mid * inner,
                start: start * inner,
            },
            rg,
        ))
    }

    /// Selects rows (first axis) by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let n_rows = *shape.first().unwrap_or(&0);
        let width: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(index.len() * width);
        for idx in index {
            match *idx {
                Some(r) if r < n_rows => out.extend_from_slice(&xt.data()[r * width..(r + 1) * width]),
                Some(r) => return Err(mismatch("gather_rows", &shape, &[r])),
                None => out.extend(core::iter::repeat_n(0.0, width)),
            }
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Row gather for integer indices, e.g. an embedding lookup.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let index: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.gather_rows(table, &index)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(mismatch("transpose", xt.shape(), &[2]));
        }
        let (r, c) = (xt.shape()[0], xt.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xt.data()[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- neural-network primitives --------------------------------------

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(xt.cols().max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xt.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::SoftmaxLast(x), rg)
    }

    /// Per-row cross-entropy `logsumexp(z) - z[target]` in nats, shape `[rows]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let zt = self.value(logits);
        let (rows, cols) = (zt.rows(), zt.cols());
        if rows != targets.len() {
            return Err(mismatch("cross_entropy", zt.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(mismatch("cross_entropy", zt.shape(), &[bad]));
        }
        let mut probs = zt.data().to_vec();
        let mut out = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = mx + math::ln(row.iter().map(|&z| math::exp(z - mx)).sum::<Real>());
            out.push(lse - row[t]);
            for z in row.iter_mut() {
                *z = math::exp(*z - lse);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, targets)?;
        Ok(self.mean(rows))
    }

    /// `op(a) · op(b)` for 2-D operands (`a` may have extra leading dims when
    /// not transposed; they are flattened into rows).
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || (ta && sa.len() != 2) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = if ta {
            (sa[1], sa[0])
        } else {
            let k = *sa.last().expect("non-empty");
            (sa.iter().product::<usize>() / k.max(1), k)
        };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        let av = MatRef::dense(self.value(a).data(), sa[sa.len() - 1], ta);
        let bv = MatRef::dense(self.value(b).data(), sb[1], tb);
        kernels::gemm(m, k, n, 1.0, av, bv, 0.0, &mut out, 0, n);
        let out_shape = if ta {
            vec![m, n]
        } else {
            let mut s = sa[..sa.len() - 1].to_vec();
            s.push(n);
            s
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `x · wᵀ` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_ex(x, false, w, true)
    }

    /// Parameter-free RMS normalization over contiguous groups of `group`
    /// values along the last axis (`group == cols` normalizes whole rows;
    /// `group == d_head` normalizes each head).
    pub fn rmsnorm(&mut self, x: Var, group: usize, eps: Real) -> Result<Var> {
        let xt = self.value(x);
        if group == 0 || xt.cols() % group != 0 {
            return Err(mismatch("rmsnorm", xt.shape(), &[group]));
        }
        let (out, inv) = kernels::rmsnorm_groups(xt.data(), group, eps);
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::RmsNorm { x, group, inv }, rg))
    }

    /// Rotary position encoding of each `d_head` block of each row; row `r`
    /// is rotated for `positions[r]`.
    pub fn rope(&mut self, x: Var, d_head: usize, positions: &[usize], base: Real) -> Result<Var> {
        let xt = self.value(x);
        if d_head == 0 || d_head % 2 != 0 || xt.cols() % d_head != 0 || xt.rows() != positions.len() {
            return Err(mismatch("rope", xt.shape(), &[d_head, positions.len()]));
        }
        let out = kernels::rope_rows(xt.data(), xt.cols(), d_head, positions, base, false);
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                d_head,
                positions: positions.to_vec(),
                base,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention with grouped KV heads.
    ///
    /// `q` is `[n_q, heads*d_head]`, `k` and `v` are `[n_k, kv_heads*d_head]`
    /// and `mask[i*n_k + j]` permits query `i` to attend to key `j`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        kv_heads: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 2 || ks.len() != 2 || ks != vs || heads == 0 || kv_heads == 0 || heads % kv_heads != 0 {
            return Err(mismatch("attention", &qs, &ks));
        }
        let d_head = qs[1] / heads;
        if d_head * heads != qs[1] || d_head * kv_heads != ks[1] || mask.len() != qs[0] * ks[0] {
            return Err(mismatch("attention", &qs, &ks));
        }
        let dims = AttnDims {
            n_q: qs[0],
            n_k: ks[0],
            heads,
            kv_heads,
            d_head,
        };
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mask,
            dims,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(qs, out)?,
            Op::Attention { q, k, v, probs, dims },
            rg,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n_params = self.store.map_or(0, |s| s.len());
        let mut grads: Vec<Option<Vec<Real>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut out = Gradients {
            leaves: Vec::new(),
            params: vec![None; n_params],
        };
        out.leaves.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(self.value(Var(i)).shape().to_vec(), g)?;
                    match node.value {
                        Value::Param(id) => out.params[id.index()] = Some(t),
                        Value::Owned(_) => out.leaves[i] = Some(t),
                    }
                }
                op => self.backprop_op(op, Var(i), &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<Real>>], v: Var, g: Vec<Real>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<Real>>], v: Var, f: impl FnOnce(&mut [Real])) {
        if !self.rg(v) {
            return;
        }
        let n = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_op(&self, op: &Op, out: Var, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let y = self.value(out).data();
        match op {
            Op::Leaf => unreachable!(),
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                self.accumulate_with(grads, *a, |da| {
                    for (i, &gi) in g.iter().enumerate() {
                        da[ia(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bv[ib(i)],
                            Binary::Div => gi / bv[ib(i)],
                        };
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for (i, &gi) in g.iter().enumerate() {
                        db[ib(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * av[ia(i)],
                            Binary::Div => {
                                let d = bv[ib(i)];
                                -gi * av[ia(i)] / (d * d)
                            }
                        };
                    }
                });
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv.iter().zip(y))
                    .map(|(&gi, (&xi, &yi))| match kind {
                        Unary::Neg => -gi,
                        Unary::Sigmoid => gi * yi * (1.0 - yi),
                        Unary::Tanh => gi * (1.0 - yi * yi),
                        Unary::Square => gi * 2.0 * xi,
                        Unary::Sqrt => gi * 0.5 / yi,
                        Unary::Exp => gi * yi,
                        Unary::Log => gi / xi,
                        Unary::Relu => {
                            if xi > 0.0 {
                                gi
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::AddConst(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis { x, outer, mid, inner } => {
                self.accumulate_with(grads, *x, |dx| {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for m in 0..*mid {
                            let base = (o * mid + m) * inner;
                            for (d, s) in dx[base..base + inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::MaxLast { x, argmax } => {
                self.accumulate_with(grads, *x, |dx| {
                    for (&i, &gi) in argmax.iter().zip(g) {
                        dx[i] += gi;
                    }
                });
            }
            Op::Concat { inputs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    let off = offset;
                    self.accumulate_with(grads, v, |dx| {
                        for o in 0..*outer {
                            for (d, s) in dx[o * w..(o + 1) * w].iter_mut().zip(&g[o * row + off..o * row + off + w]) {
                                *d += s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, outer, width, start } => {
                let w = g.len() / (*outer).max(1);
                self.accumulate_with(grads, *x, |dx| {
                    for o in 0..*outer {
                        let base = o * width + start;
                        for (d, s) in dx[base..base + w].iter_mut().zip(&g[o * w..(o + 1) * w]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let w = g.len() / index.len().max(1);
                self.accumulate_with(grads, *x, |dx| {
                    for (i, idx) in index.iter().enumerate() {
                        if let Some(r) = *idx {
                            for (d, s) in dx[r * w..(r + 1) * w].iter_mut().zip(&g[i * w..(i + 1) * w]) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.value(*x).shape();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxLast(x) => {
                let cols = self.value(out).cols().max(1);
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.value(*logits).cols();
                let mut dz = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut dz[r * cols..(r + 1) * cols];
                    row[t] -= 1.0;
                    for z in row.iter_mut() {
                        *z *= g[r];
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let a_cols = if *ta { m } else { k };
                let b_cols = if *tb { k } else { n };
                let gv = MatRef::dense(g, n, false);
                if self.rg(*a) {
                    // d op(a) = g · op(b)ᵀ
                    let opb_t = MatRef::dense(bv, b_cols, *tb).t();
                    let mut da = vec![0.0; m * k];
                    if *ta {
                        // a is stored k×m: da = op(b) · gᵀ
                        kernels::gemm(k, n, m, 1.0, opb_t.t(), gv.t(), 0.0, &mut da, 0, m);
                    } else {
                        kernels::gemm(m, n, k, 1.0, gv, opb_t, 0.0, &mut da, 0, k);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let opa = MatRef::dense(av, a_cols, *ta);
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        // b is stored n×k: db = gᵀ · op(a)
                        kernels::gemm(n, m, k, 1.0, gv.t(), opa, 0.0, &mut db, 0, k);
                    } else {
                        kernels::gemm(k, m, n, 1.0, opa.t(), gv, 0.0, &mut db, 0, n);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::RmsNorm { x, group, inv } => {
                let mut dx = vec![0.0; g.len()];
                for (((dr, gr), yr), &r) in dx.chunks_mut(*group).zip(g.chunks(*group)).zip(y.chunks(*group)).zip(inv) {
                    let dot: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<Real>() / *group as Real;
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = r * (gi - yi * dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Rope {
                x,
                d_head,
                positions,
                base,
            } => {
                let cols = self.value(*x).cols();
                let dx = kernels::rope_rows(g, cols, *d_head, positions, *base, true);
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, probs, dims } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    *dims,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = math::exp(*z - mx);
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}

/// Result of [`Graph::backward`]: gradients of differentiable leaves and of
/// parameters.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients indexed by [`ParamId::index`].
    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }

    /// Gradient for every parameter of `store`, with zeros where a parameter
    /// was not reached.
    pub fn dense_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()))
            })
            .collect()
    }

    /// Name of the first parameter whose gradient is not finite.
    pub fn first_non_finite(&self, store: &ParamStore) -> Option<alloc::string::String> {
        store
            .ids()
            .find(|&id| self.param(id).is_some_and(|g| !g.is_finite()))
            .map(|id| store.name(id).to_string())
    }
}
