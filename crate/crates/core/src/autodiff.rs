//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs. [`Tape::backward`] walks the nodes in exact reverse recording
//! order, so no explicit topological sort is needed. Gradients only flow into
//! nodes that transitively depend on a tracked leaf, and weight gradients of
//! untracked (frozen) parameters are never formed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, DwGeometry, RowStats};
use crate::tensor::{check_shape, Tensor, TensorId};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<TensorId>),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Softmax(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    DwConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Repeat(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Rows(Vec<RowStats>),
    Probs(Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    aux: Aux,
    requires_grad: bool,
}

/// A single recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by the identity of the leaf
/// tensors they belong to.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_id: HashMap<TensorId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_id.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Accumulates this tensor's gradient (if any) into its grad buffer.
    /// Returns whether a gradient was present.
    pub fn apply_to(&self, t: &mut Tensor) -> Result<bool> {
        match self.by_id.get(&t.id()) {
            Some(g) if t.requires_grad() => {
                t.accumulate_grad(g)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape on which no leaf is ever tracked; backward yields nothing.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf; it is tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let tracked = t.requires_grad() && !self.no_grad;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf(Some(t.id())),
            aux: Aux::None,
            requires_grad: tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an untracked value.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf(None),
            aux: Aux::None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as an untracked tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    fn inputs(op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } | Op::DwConv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _)
            | Op::Sum(x)
            | Op::MeanAxis { x, .. }
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Permute { x, .. }
            | Op::Reshape(x)
            | Op::Narrow { x, .. }
            | Op::Repeat(x) => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn record(&mut self, op: Op, shape: Vec<usize>) -> Var {
        let (value, aux) = self.compute(&op, &shape);
        let requires_grad = Self::inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            aux,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Pure forward evaluation of a non-leaf op from the recorded input values.
    fn compute(&self, op: &Op, shape: &[usize]) -> (Vec<f64>, Aux) {
        let val = |v: &Var| self.nodes[v.0].value.as_slice();
        let shp = |v: &Var| self.nodes[v.0].shape.as_slice();
        match op {
            Op::Leaf(_) => unreachable!("leaves are not recomputed"),
            Op::MatMul(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                let mut c = vec![0.0; m * n];
                kernels::gemm(m, k, n, val(a), (k, 1), val(b), (n, 1), &mut c, false);
                (c, Aux::None)
            }
            Op::Linear { x, w, b } => {
                let (din, dout) = (shp(w)[0], shp(w)[1]);
                let rows = val(x).len() / din;
                let mut y = vec![0.0; rows * dout];
                kernels::gemm(
                    rows,
                    din,
                    dout,
                    val(x),
                    (din, 1),
                    val(w),
                    (dout, 1),
                    &mut y,
                    false,
                );
                if let Some(b) = b {
                    for row in y.chunks_exact_mut(dout) {
                        add_into(row, val(b));
                    }
                }
                (y, Aux::None)
            }
            Op::Add(a, b) => {
                let mut y = val(a).to_vec();
                let bv = val(b);
                for chunk in y.chunks_exact_mut(bv.len()) {
                    add_into(chunk, bv);
                }
                (y, Aux::None)
            }
            Op::Mul(a, b) => (
                val(a).iter().zip(val(b)).map(|(p, q)| p * q).collect(),
                Aux::None,
            ),
            Op::Scale(x, c) => (val(x).iter().map(|v| v * c).collect(), Aux::None),
            Op::Sum(x) => (vec![val(x).iter().sum()], Aux::None),
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(shp(x), *axis);
                let xv = val(x);
                let mut y = vec![0.0; outer * inner];
                for o in 0..outer {
                    let dst = &mut y[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let start = (o * len + a) * inner;
                        add_into(dst, &xv[start..start + inner]);
                    }
                    let inv = 1.0 / len as f64;
                    dst.iter_mut().for_each(|v| *v *= inv);
                }
                (y, Aux::None)
            }
            Op::Gelu(x) => (
                val(x).iter().map(|&v| kernels::gelu(v)).collect(),
                Aux::None,
            ),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let d = *shp(x).last().unwrap();
                let (y, stats) = kernels::layernorm_forward(val(x), d, val(gamma), val(beta), *eps);
                (y, Aux::Rows(stats))
            }
            Op::Softmax(x) => {
                let n = *shp(x).last().unwrap();
                (kernels::softmax_rows(val(x), n), Aux::None)
            }
            Op::Bmm { a, b, trans_b } => {
                let (batch, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                let n = shape[2];
                let (av, bv) = (val(a), val(b));
                let mut c = vec![0.0; batch * m * n];
                let bstr = if *trans_b { (1, k) } else { (n, 1) };
                for i in 0..batch {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        (k, 1),
                        &bv[i * k * n..(i + 1) * k * n],
                        bstr,
                        &mut c[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                (c, Aux::None)
            }
            Op::Permute { x, perm } => (kernels::permute(val(x), shp(x), perm).0, Aux::None),
            Op::Reshape(x) => (val(x).to_vec(), Aux::None),
            Op::DwConv { x, w, b, dilation } => {
                let g = dw_geometry(shp(x), shp(w)[1], *dilation);
                (
                    kernels::dwconv_forward(g, val(x), val(w), b.as_ref().map(val)),
                    Aux::None,
                )
            }
            Op::Narrow { x, axis, start } => {
                let (outer, len, inner) = split_axis(shp(x), *axis);
                let take = shape[*axis];
                let xv = val(x);
                let mut y = Vec::with_capacity(outer * take * inner);
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    y.extend_from_slice(&xv[base..base + take * inner]);
                }
                (y, Aux::None)
            }
            Op::Concat { parts, axis } => {
                let outer: usize = shape[..*axis].iter().product();
                let mut y = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for p in parts {
                        let (_, len, inner) = split_axis(shp(p), *axis);
                        let block = len * inner;
                        y.extend_from_slice(&val(p)[o * block..(o + 1) * block]);
                    }
                }
                (y, Aux::None)
            }
            Op::Repeat(x) => {
                let xv = val(x);
                let mut y = Vec::with_capacity(shape[0] * xv.len());
                for _ in 0..shape[0] {
                    y.extend_from_slice(xv);
                }
                (y, Aux::None)
            }
            Op::CrossEntropy { logits, labels } => {
                let k = shp(logits)[1];
                let probs = kernels::softmax_rows(val(logits), k);
                let lv = val(logits);
                let mut loss = 0.0;
                for (i, &label) in labels.iter().enumerate() {
                    let row = &lv[i * k..(i + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    loss += lse - row[label];
                }
                (vec![loss / labels.len() as f64], Aux::Probs(probs))
            }
        }
    }

    /// Re-evaluates every recorded node from its inputs and reports whether all
    /// values are reproduced bit-exactly.
    pub fn replay_matches(&self) -> bool {
        self.nodes.iter().all(|n| match n.op {
            Op::Leaf(_) => true,
            _ => {
                let (value, _) = self.compute(&n.op, &n.shape);
                value.len() == n.value.len()
                    && value
                        .iter()
                        .zip(&n.value)
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            }
        })
    }

    fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::dim_err("matmul", sa, sb));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.record(Op::MatMul(a, b), shape))
    }

    /// `y = x·W + b` over the last axis of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Self::dim_err("linear", sx, sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(Self::dim_err("linear bias", sw, self.shape(b)));
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = sw[1];
        Ok(self.record(Op::Linear { x, w, b }, shape))
    }

    /// Elementwise sum; `b` may broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Self::dim_err("add", sa, sb));
        }
        let shape = sa.to_vec();
        Ok(self.record(Op::Add(a, b), shape))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Self::dim_err("mul", sa, sb));
        }
        let shape = sa.to_vec();
        Ok(self.record(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let shape = self.shape(x).to_vec();
        self.record(Op::Scale(x, c), shape)
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        self.record(Op::Sum(x), vec![1])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() {
            return Err(Error::Contract(format!(
                "axis {axis} out of range for {sx:?}"
            )));
        }
        let mut shape = sx.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.record(Op::MeanAxis { x, axis }, shape))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        self.record(Op::Gelu(x), shape)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Self::dim_err("layernorm", sx, self.shape(p)));
            }
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layernorm epsilon {eps} must be positive"
            )));
        }
        let shape = sx.to_vec();
        Ok(self.record(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            shape,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        self.record(Op::Softmax(x), shape)
    }

    /// Batched matrix product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]`
    /// read transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let inner = if trans_b { sb.get(2) } else { sb.get(1) };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || Some(&sa[2]) != inner {
            return Err(Self::dim_err("bmm", sa, sb));
        }
        let n = if trans_b { sb[1] } else { sb[2] };
        let shape = vec![sa[0], sa[1], n];
        Ok(self.record(Op::Bmm { a, b, trans_b }, shape))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len()
            || perm
                .iter()
                .any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Contract(format!(
                "{perm:?} is not a permutation of {sx:?}"
            )));
        }
        let shape = perm.iter().map(|&p| sx[p]).collect();
        Ok(self.record(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            shape,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel = check_shape(shape)?;
        if numel != self.value(x).len() {
            return Err(Self::dim_err("reshape", self.shape(x), shape));
        }
        Ok(self.record(Op::Reshape(x), shape.to_vec()))
    }

    /// Depthwise 2-D cross-correlation of `[B,C,H,W]` with `[C,k,k]` filters,
    /// stride 1, zero "same" padding of `(k-1)·dilation/2`.
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 3 || sw[1] != sw[2] {
            return Err(Self::dim_err("dwconv2d weight", sx, sw));
        }
        if sw[1] % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel size {} must be odd",
                sw[1]
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        if sx.len() != 4 || sx[1] != sw[0] {
            return Err(Self::dim_err("dwconv2d", sx, sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Self::dim_err("dwconv2d bias", sw, self.shape(b)));
            }
        }
        let shape = sx.to_vec();
        Ok(self.record(Op::DwConv { x, w, b, dilation }, shape))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::Contract(format!(
                "narrow({axis}, {start}, {len}) out of range for {sx:?}"
            )));
        }
        let mut shape = sx.to_vec();
        shape[axis] = len;
        Ok(self.record(Op::Narrow { x, axis, start }, shape))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Self::dim_err("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.record(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
        ))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Contract("repeat count must be positive".into()));
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        Ok(self.record(Op::Repeat(x), shape))
    }

    /// Mean cross-entropy of `[B,K]` raw logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Self::dim_err("cross_entropy", s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::Validation(format!(
                "label {bad} >= {} classes",
                s[1]
            )));
        }
        Ok(self.record(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            vec![1],
        ))
    }

    /// Back-propagates from a scalar and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf(Some(id)) = node.op {
                match out.by_id.get_mut(&id) {
                    Some(buf) => add_into(buf, &g),
                    None => {
                        out.by_id.insert(id, g);
                    }
                }
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| nodes[v.0].value.as_slice();
        let shp = |v: &Var| nodes[v.0].shape.as_slice();
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => add_into(buf, &delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, (n, 1), val(b), (1, n), &mut da, false);
                    acc(*a, da);
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(a), (1, k), g, (n, 1), &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (din, dout) = (shp(w)[0], shp(w)[1]);
                let rows = g.len() / dout;
                if wants(x) {
                    let mut dx = vec![0.0; rows * din];
                    kernels::gemm(
                        rows,
                        dout,
                        din,
                        g,
                        (dout, 1),
                        val(w),
                        (1, dout),
                        &mut dx,
                        false,
                    );
                    acc(*x, dx);
                }
                if wants(w) {
                    let mut dw = vec![0.0; din * dout];
                    kernels::gemm(
                        din,
                        rows,
                        dout,
                        val(x),
                        (1, din),
                        g,
                        (dout, 1),
                        &mut dw,
                        false,
                    );
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|b| wants(b)) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks_exact(dout) {
                        add_into(&mut db, row);
                    }
                    acc(b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(b) {
                    let n = val(b).len();
                    let mut db = vec![0.0; n];
                    for chunk in g.chunks_exact(n) {
                        add_into(&mut db, chunk);
                    }
                    acc(*b, db);
                }
                acc(*a, g.to_vec());
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(*a, g.iter().zip(val(b)).map(|(p, q)| p * q).collect());
                }
                if wants(b) {
                    acc(*b, g.iter().zip(val(a)).map(|(p, q)| p * q).collect());
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; val(x).len()]),
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(shp(x), *axis);
                let inv = 1.0 / len as f64;
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        dx.extend(src.iter().map(|v| v * inv));
                    }
                }
                acc(*x, dx);
            }
            Op::Gelu(x) => acc(
                *x,
                g.iter()
                    .zip(val(x))
                    .map(|(gv, &xv)| gv * kernels::gelu_derivative(xv))
                    .collect(),
            ),
            Op::LayerNorm { x, gamma, beta, .. } => {
                let Aux::Rows(stats) = &node.aux else {
                    unreachable!("layernorm records row statistics")
                };
                let d = *shp(x).last().unwrap();
                let want_params = wants(gamma) || wants(beta);
                let (dx, dparams) =
                    kernels::layernorm_backward(val(x), d, val(gamma), stats, g, want_params);
                if wants(x) {
                    acc(*x, dx);
                }
                if let Some((dgamma, dbeta)) = dparams {
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                acc(*x, kernels::softmax_rows_backward(&node.value, g, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let (batch, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                let n = node.shape[2];
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    // dA = dC·Bᵀ, where B is [k,n] (or stored [n,k] when transposed)
                    let bstr = if *trans_b { (k, 1) } else { (1, n) };
                    for i in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &bv[i * k * n..(i + 1) * k * n],
                            bstr,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    acc(*a, da);
                }
                if wants(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let ga = &g[i * m * n..(i + 1) * m * n];
                        let aa = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // stored B is [n,k]: dB = dCᵀ·A
                            kernels::gemm(n, m, k, ga, (1, n), aa, (k, 1), out, false);
                        } else {
                            kernels::gemm(k, m, n, aa, (1, k), ga, (n, 1), out, false);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                acc(*x, kernels::permute(g, &node.shape, &inv).0);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::DwConv { x, w, b, dilation } => {
                let geom = dw_geometry(shp(x), shp(w)[1], *dilation);
                let want_b = b.as_ref().is_some_and(wants);
                let (dx, dw, db) =
                    kernels::dwconv_backward(geom, val(x), val(w), g, (wants(x), wants(w), want_b));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db);
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, len, inner) = split_axis(shp(x), *axis);
                let take = node.shape[*axis];
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    dx[base..base + take * inner]
                        .copy_from_slice(&g[o * take * inner..(o + 1) * take * inner]);
                }
                acc(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let row: usize = node.shape[*axis..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let (_, len, inner) = split_axis(shp(p), *axis);
                    let block = len * inner;
                    if wants(p) {
                        let mut dp = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * row + offset;
                            dp.extend_from_slice(&g[base..base + block]);
                        }
                        acc(*p, dp);
                    }
                    offset += block;
                }
            }
            Op::Repeat(x) => {
                let n = val(x).len();
                let mut dx = vec![0.0; n];
                for chunk in g.chunks_exact(n) {
                    add_into(&mut dx, chunk);
                }
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let Aux::Probs(probs) = &node.aux else {
                    unreachable!("cross-entropy records probabilities")
                };
                let k = shp(logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &label) in labels.iter().enumerate() {
                    dl[i * k + label] -= scale;
                }
                acc(*logits, dl);
            }
        }
    }
}

fn dw_geometry(xshape: &[usize], kernel: usize, dilation: usize) -> DwGeometry {
    DwGeometry {
        batch: xshape[0],
        channels: xshape[1],
        height: xshape[2],
        width: xshape[3],
        kernel,
        dilation,
    }
}

/// Maximum relative error between the analytic gradient of `f` at `x` and a
/// central finite difference.
///
/// The step for element `i` is `h·max(1, |x_i|)`; the error for that element is
/// `|analytic − numeric| / max(1, |analytic|)`. Any failure or non-finite value
/// in `f` yields `+∞`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let tracked = x.clone().tracked();
    let mut tape = Tape::new();
    let xv = tape.leaf(&tracked);
    let Ok(out) = f(&mut tape, xv) else {
        return f64::INFINITY;
    };
    if tape.value(out).len() != 1 || !tape.value(out)[0].is_finite() {
        return f64::INFINITY;
    }
    let analytic = match tape.backward(out) {
        Ok(grads) => grads
            .get(&tracked)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()]),
        Err(_) => return f64::INFINITY,
    };
    let eval = |probe: &Tensor| -> f64 {
        let mut tape = Tape::inference();
        let v = tape.constant(probe);
        match f(&mut tape, v) {
            Ok(out) if tape.value(out).len() == 1 => tape.value(out)[0],
            _ => f64::NAN,
        }
    };
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let step = h * x0.abs().max(1.0);
        probe.data_mut()[i] = x0 + step;
        let plus = eval(&probe);
        probe.data_mut()[i] = x0 - step;
        let minus = eval(&probe);
        probe.data_mut()[i] = x0;
        let numeric = (plus - minus) / (2.0 * step);
        if !numeric.is_finite() {
            return f64::INFINITY;
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
