//! Reverse-mode differentiation over a recorded graph of tensor primitives.
//!
//! Nodes are evaluated eagerly as they are added, and the recorded graph can
//! be re-run with [`Graph::recompute`] after leaf values change. That second
//! property is what the finite-difference checker relies on.
//!
//! Numeric primitives: add, sub, scalar-mul (by constant or by a scalar node),
//! element-wise mul, matmul, exp, log, SELU, (masked) mean over an axis,
//! L2-normalize over the last axis, dot, masked (log-)softmax over the last
//! axis, embedding lookup and concatenation. `narrow` and `stop_gradient` are
//! structural: they move or detach values without arithmetic.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::scalar::{selu, selu_grad, Real};
use crate::tensor::{gemm_acc, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, T),
    ScaleBy(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Exp(NodeId),
    Log(NodeId),
    Selu(NodeId),
    Mean {
        x: NodeId,
        axis: usize,
        mask: Option<Rc<[bool]>>,
    },
    L2Normalize(NodeId),
    Dot(NodeId, NodeId),
    Softmax {
        x: NodeId,
        mask: Option<Rc<[bool]>>,
        log: bool,
    },
    Embedding {
        table: NodeId,
        ids: Rc<[usize]>,
        prefix: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    StopGradient(NodeId),
}

#[derive(Debug, Clone)]
struct LeafInfo {
    trainable: bool,
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    leaf: Option<LeafInfo>,
}

/// Gradients keyed by trainable leaf name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// L2 norm over every gradient coordinate.
    pub fn global_norm(&self) -> T {
        self.map.values().map(Tensor::norm_sq).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// A recorded computation.
///
/// Single-threaded: one graph per training step or evaluation. Parallel
/// callers build separate graphs.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    names: BTreeMap<String, NodeId>,
    matmul_adjoint_fault: Option<T>,
}

fn mismatch<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    })
}

fn invalid<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Invalid {
        op,
        detail: detail.into(),
    })
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: BTreeMap::new(),
            matmul_adjoint_fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a named leaf. Trainable leaves receive gradients; frozen ones never do.
    pub fn param(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<NodeId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return invalid("param", format!("duplicate leaf name `{name}`"));
        }
        let id = self.push_leaf(value, trainable);
        self.names.insert(name, id);
        Ok(id)
    }

    /// Adds an anonymous frozen leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: trainable,
            leaf: Some(LeafInfo { trainable }),
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Named trainable leaves in insertion order.
    pub fn trainable_leaves(&self) -> Vec<(String, NodeId)> {
        let mut out: Vec<_> = self
            .names
            .iter()
            .filter(|(_, id)| self.nodes[id.0].leaf.as_ref().is_some_and(|l| l.trainable))
            .map(|(n, id)| (n.clone(), *id))
            .collect();
        out.sort_by_key(|(_, id)| *id);
        out
    }

    /// Replaces a leaf value. Shapes must agree. Call [`Graph::recompute`] afterwards.
    pub fn set_value(&mut self, id: NodeId, value: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if node.leaf.is_none() {
            return invalid("set_value", "node is not a leaf");
        }
        if node.value.shape() != value.shape() {
            return mismatch("set_value", node.value.shape(), value.shape());
        }
        node.value = value;
        Ok(())
    }

    /// Binds named leaves, re-evaluates the graph and returns `output`.
    pub fn forward(&mut self, inputs: &[(&str, Tensor<T>)], output: NodeId) -> Result<Tensor<T>> {
        for (name, value) in inputs {
            let id = self
                .leaf(name)
                .ok_or_else(|| TensorError::UnknownLeaf((*name).to_string()))?;
            self.set_value(id, value.clone())?;
        }
        self.recompute()?;
        Ok(self.value(output).clone())
    }

    /// Sign pattern (`x > 0`) of every SELU input element, in recording order.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn selu_signs(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Selu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    /// Re-evaluates every non-leaf node in recording order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    #[doc(hidden)]
    /// Scales the right-hand adjoint of every matmul. Negative control for gradcheck.
    pub fn inject_matmul_adjoint_fault(&mut self, factor: T) {
        self.matmul_adjoint_fault = Some(factor);
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient(_) => false,
            _ => op_inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            leaf: None,
        });
        Ok(id)
    }

    // ---- primitive constructors -------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    /// Multiplies every element of `a` by the one-element node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.push(Op::ScaleBy(a, s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    /// `a · b`. `a` may carry leading batch dimensions; `b` is either a shared
    /// matrix or has the same batch dimension as `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul {
            a,
            b,
            transpose_b: false,
        })
    }

    /// `a · bᵀ` over the last two axes of `b`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul {
            a,
            b,
            transpose_b: true,
        })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn selu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Selu(a))
    }

    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::Mean { x, axis, mask: None })
    }

    /// Mean over `axis` restricted to positions where `mask` is true. The mask
    /// covers the dimensions up to and including `axis`.
    pub fn masked_mean(&mut self, x: NodeId, axis: usize, mask: Vec<bool>) -> Result<NodeId> {
        self.push(Op::Mean {
            x,
            axis,
            mask: Some(mask.into()),
        })
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::L2Normalize(x))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dot(a, b))
    }

    pub fn softmax(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        self.push(Op::Softmax {
            x,
            mask: mask.map(Into::into),
            log: false,
        })
    }

    /// Log-probabilities of the masked softmax; masked positions yield 0.
    pub fn log_softmax(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        self.push(Op::Softmax {
            x,
            mask: mask.map(Into::into),
            log: true,
        })
    }

    /// Row lookup: output shape is `prefix ++ [table columns]`.
    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>, prefix: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Embedding {
            table,
            ids: ids.into(),
            prefix,
        })
    }

    pub fn concat(&mut self, inputs: Vec<NodeId>, axis: usize) -> Result<NodeId> {
        self.push(Op::Concat { inputs, axis })
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Narrow { x, axis, start, len })
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::StopGradient(x))
    }

    /// Sum of all elements, expressed through repeated means.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let mut cur = x;
        while self.value(cur).rank() > 0 {
            cur = self.mean(cur, 0)?;
        }
        self.scale(cur, n)
    }

    // ---- evaluation --------------------------------------------------------

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn eval(&self, op: &Op<T>) -> Result<Tensor<T>> {
        match op {
            Op::Leaf => unreachable!("leaves are never evaluated"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let name = match op {
                    Op::Add(..) => "add",
                    Op::Sub(..) => "sub",
                    _ => "mul",
                };
                if x.shape() != y.shape() {
                    return mismatch(name, x.shape(), y.shape());
                }
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| match op {
                        Op::Add(..) => p + q,
                        Op::Sub(..) => p - q,
                        _ => p * q,
                    })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Op::Scale(a, c) => Ok(self.val(*a).map(|v| v * *c)),
            Op::ScaleBy(a, s) => {
                let sv = self.val(*s);
                if !sv.is_scalar() {
                    return mismatch("scale_by", self.val(*a).shape(), sv.shape());
                }
                let c = sv.item();
                Ok(self.val(*a).map(|v| v * c))
            }
            Op::MatMul { a, b, transpose_b } => self.eval_matmul(*a, *b, *transpose_b),
            Op::Exp(a) => Ok(self.val(*a).map(|v| v.exp())),
            Op::Log(a) => {
                let x = self.val(*a);
                if let Some(bad) = x.data().iter().find(|v| !(**v > T::zero())) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                Ok(x.map(|v| v.ln()))
            }
            Op::Selu(a) => Ok(self.val(*a).map(selu)),
            Op::Mean { x, axis, mask } => {
                let xv = self.val(*x);
                let shape = xv.shape();
                if *axis >= shape.len() {
                    return invalid("mean", format!("axis {axis} out of range for {shape:?}"));
                }
                let (outer, k, inner) = split_axis(shape, *axis);
                if let Some(m) = mask {
                    if m.len() != outer * k {
                        return mismatch("mean", shape, &[m.len()]);
                    }
                }
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    let mut count = 0usize;
                    for j in 0..k {
                        if mask.as_ref().is_some_and(|m| !m[o * k + j]) {
                            continue;
                        }
                        count += 1;
                        let src = &xv.data()[(o * k + j) * inner..(o * k + j + 1) * inner];
                        for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                    if count == 0 {
                        return Err(TensorError::Domain {
                            op: "mean",
                            detail: format!("slice {o} has no unmasked positions"),
                        });
                    }
                    let inv = T::one() / T::from_usize(count).unwrap();
                    for v in &mut out[o * inner..(o + 1) * inner] {
                        *v *= inv;
                    }
                }
                let mut oshape = shape.to_vec();
                oshape.remove(*axis);
                Tensor::new(oshape, out)
            }
            Op::L2Normalize(x) => {
                let xv = self.val(*x);
                let d = *xv.shape().last().unwrap_or(&1);
                let mut out = xv.data().to_vec();
                for (r, row) in out.chunks_mut(d).enumerate() {
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if !(norm > T::zero()) {
                        return Err(TensorError::Domain {
                            op: "l2_normalize",
                            detail: format!("row {r} has zero norm"),
                        });
                    }
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                }
                Tensor::new(xv.shape().to_vec(), out)
            }
            Op::Dot(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.shape() != y.shape() {
                    return mismatch("dot", x.shape(), y.shape());
                }
                let s = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).sum();
                Ok(Tensor::scalar(s))
            }
            Op::Softmax { x, mask, log } => {
                let xv = self.val(*x);
                if let Some(m) = mask {
                    if m.len() != xv.numel() {
                        return mismatch("softmax", xv.shape(), &[m.len()]);
                    }
                }
                let d = *xv.shape().last().unwrap_or(&1);
                let mut out = vec![T::zero(); xv.numel()];
                for (r, (row, orow)) in xv.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
                    let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * d + j]);
                    let mut max = T::neg_infinity();
                    for (j, &v) in row.iter().enumerate() {
                        if keep(j) && v > max {
                            max = v;
                        }
                    }
                    if max == T::neg_infinity() {
                        return Err(TensorError::Domain {
                            op: "softmax",
                            detail: format!("row {r} is fully masked"),
                        });
                    }
                    let mut z = T::zero();
                    for (j, &v) in row.iter().enumerate() {
                        if keep(j) {
                            z += (v - max).exp();
                        }
                    }
                    let log_z = z.ln();
                    for (j, &v) in row.iter().enumerate() {
                        if keep(j) {
                            orow[j] = if *log {
                                v - max - log_z
                            } else {
                                (v - max).exp() / z
                            };
                        }
                    }
                }
                Tensor::new(xv.shape().to_vec(), out)
            }
            Op::Embedding { table, ids, prefix } => {
                let tv = self.val(*table);
                if tv.rank() != 2 {
                    return invalid("embedding", format!("table must be rank 2, got {:?}", tv.shape()));
                }
                let (rows, d) = (tv.shape()[0], tv.shape()[1]);
                if prefix.iter().product::<usize>() != ids.len() {
                    return mismatch("embedding", prefix, &[ids.len()]);
                }
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids.iter() {
                    if id >= rows {
                        return invalid("embedding", format!("id {id} out of range ({rows} rows)"));
                    }
                    out.extend_from_slice(tv.row(id));
                }
                let mut shape = prefix.clone();
                shape.push(d);
                Tensor::new(shape, out)
            }
            Op::Concat { inputs, axis } => {
                let first = match inputs.first() {
                    Some(f) => self.val(*f),
                    None => return invalid("concat", "no inputs"),
                };
                let base = first.shape();
                if *axis >= base.len() {
                    return invalid("concat", format!("axis {axis} out of range for {base:?}"));
                }
                let mut total = 0;
                for i in inputs {
                    let s = self.val(*i).shape();
                    let compatible = s.len() == base.len()
                        && s.iter().zip(base).enumerate().all(|(d, (p, q))| d == *axis || p == q);
                    if !compatible {
                        return mismatch("concat", base, s);
                    }
                    total += s[*axis];
                }
                let (outer, _, inner) = split_axis(base, *axis);
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for i in inputs {
                        let v = self.val(*i);
                        let chunk = v.shape()[*axis] * inner;
                        out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = base.to_vec();
                shape[*axis] = total;
                Tensor::new(shape, out)
            }
            Op::Narrow { x, axis, start, len } => {
                let xv = self.val(*x);
                let shape = xv.shape();
                if *axis >= shape.len() || start + len > shape[*axis] {
                    return invalid(
                        "narrow",
                        format!("[{start}, {}) out of range on axis {axis} of {shape:?}", start + len),
                    );
                }
                let (outer, k, inner) = split_axis(shape, *axis);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * k + start) * inner;
                    out.extend_from_slice(&xv.data()[base..base + len * inner]);
                }
                let mut oshape = shape.to_vec();
                oshape[*axis] = *len;
                Tensor::new(oshape, out)
            }
            Op::StopGradient(x) => Ok(self.val(*x).clone()),
        }
    }

    fn eval_matmul(&self, a: NodeId, b: NodeId, tb: bool) -> Result<Tensor<T>> {
        let (av, bv) = (self.val(a), self.val(b));
        let g = MatMulGeom::new(av.shape(), bv.shape(), tb)?;
        let mut out = vec![T::zero(); g.batch * g.m * g.n];
        for bi in 0..g.batch {
            gemm_acc(
                &mut out[bi * g.m * g.n..(bi + 1) * g.m * g.n],
                &av.data()[bi * g.m * g.k..(bi + 1) * g.m * g.k],
                g.rhs(bv.data(), bi),
                g.m,
                g.k,
                g.n,
                false,
                tb,
            );
        }
        Tensor::new(g.out_shape, out)
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every trainable leaf it
    /// depends on. Frozen leaves and leaves behind `stop_gradient` are absent.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.val(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &gy, &mut grads)?;
        }
        let mut map = BTreeMap::new();
        for (name, id) in &self.names {
            let node = &self.nodes[id.0];
            if !node.leaf.as_ref().is_some_and(|l| l.trainable) || id.0 > loss.0 {
                continue;
            }
            if let Some(g) = grads[id.0].take() {
                map.insert(name.clone(), g);
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        y: &Tensor<T>,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, gy.map(|v| v * c));
            }
            Op::ScaleBy(a, s) => {
                let c = self.val(*s).item();
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.map(|v| v * c));
                }
                if self.wants(*s) {
                    let ds: T = gy.data().iter().zip(self.val(*a).data()).map(|(&g, &x)| g * x).sum();
                    self.accumulate(grads, *s, Tensor::full(self.val(*s).shape(), ds));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let d = gy.data().iter().zip(bv.data()).map(|(&g, &q)| g * q).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = gy.data().iter().zip(av.data()).map(|(&g, &p)| g * p).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::MatMul { a, b, transpose_b } => {
                let tb = *transpose_b;
                let (av, bv) = (self.val(*a), self.val(*b));
                let g = MatMulGeom::new(av.shape(), bv.shape(), tb)?;
                if self.wants(*a) {
                    let mut da = vec![T::zero(); av.numel()];
                    for bi in 0..g.batch {
                        // dA = dC · op(B)ᵀ
                        gemm_acc(
                            &mut da[bi * g.m * g.k..(bi + 1) * g.m * g.k],
                            &gy.data()[bi * g.m * g.n..(bi + 1) * g.m * g.n],
                            g.rhs(bv.data(), bi),
                            g.m,
                            g.n,
                            g.k,
                            false,
                            !tb,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bv.numel()];
                    let slice = g.k * g.n;
                    for bi in 0..g.batch {
                        let off = if g.shared_rhs { 0 } else { bi * slice };
                        let dst = &mut db[off..off + slice];
                        let dc = &gy.data()[bi * g.m * g.n..(bi + 1) * g.m * g.n];
                        let a_s = &av.data()[bi * g.m * g.k..(bi + 1) * g.m * g.k];
                        if tb {
                            // B stored [n×k]: dB = dCᵀ · A
                            gemm_acc(dst, dc, a_s, g.n, g.m, g.k, true, false);
                        } else {
                            // dB = Aᵀ · dC
                            gemm_acc(dst, a_s, dc, g.k, g.m, g.n, true, false);
                        }
                    }
                    if let Some(f) = self.matmul_adjoint_fault {
                        for v in &mut db {
                            *v *= f;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Exp(a) => {
                let d = gy.data().iter().zip(y.data()).map(|(&g, &e)| g * e).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Log(a) => {
                let x = self.val(*a);
                let d = gy.data().iter().zip(x.data()).map(|(&g, &v)| g / v).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Selu(a) => {
                let x = self.val(*a);
                let d = gy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| g * selu_grad(v))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::Mean { x, axis, mask } => {
                let xv = self.val(*x);
                let (outer, k, inner) = split_axis(xv.shape(), *axis);
                let mut dx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    let kept: Vec<usize> = (0..k)
                        .filter(|&j| mask.as_ref().is_none_or(|m| m[o * k + j]))
                        .collect();
                    let inv = T::one() / T::from_usize(kept.len()).unwrap();
                    let src = &gy.data()[o * inner..(o + 1) * inner];
                    for j in kept {
                        let dst = &mut dx[(o * k + j) * inner..(o * k + j + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::L2Normalize(x) => {
                let xv = self.val(*x);
                let d = *xv.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); xv.numel()];
                for r in 0..xv.numel() / d {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &gy.data()[r * d..(r + 1) * d];
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let proj: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * proj) / norm;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Dot(a, b) => {
                let g = gy.item();
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, bv.map(|v| v * g));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, av.map(|v| v * g));
                }
            }
            Op::Softmax { x, mask, log } => {
                let d = *y.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.numel()];
                for r in 0..y.numel() / d {
                    let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * d + j]);
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &gy.data()[r * d..(r + 1) * d];
                    if *log {
                        let gsum: T = (0..d).filter(|&j| keep(j)).map(|j| gr[j]).sum();
                        for j in (0..d).filter(|&j| keep(j)) {
                            dx[r * d + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    } else {
                        let dotp: T = (0..d).filter(|&j| keep(j)).map(|j| gr[j] * yr[j]).sum();
                        for j in (0..d).filter(|&j| keep(j)) {
                            dx[r * d + j] = yr[j] * (gr[j] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Embedding { table, ids, .. } => {
                let tv = self.val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.numel()];
                for (p, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gy.data()[p * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for i in inputs {
                    let v = self.val(*i);
                    let len = v.shape()[*axis];
                    if self.wants(*i) {
                        let mut di = Vec::with_capacity(v.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            di.extend_from_slice(&gy.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, *i, Tensor::new(v.shape().to_vec(), di)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let xv = self.val(*x);
                let (outer, k, inner) = split_axis(xv.shape(), *axis);
                let mut dx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    let base = (o * k + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
        }
        Ok(())
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) | Op::ScaleBy(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Scale(a, _) | Op::Exp(a) | Op::Log(a) | Op::Selu(a) | Op::L2Normalize(a) | Op::StopGradient(a) => {
            vec![*a]
        }
        Op::Mean { x, .. } | Op::Softmax { x, .. } | Op::Narrow { x, .. } => vec![*x],
        Op::Embedding { table, .. } => vec![*table],
        Op::Concat { inputs, .. } => inputs.clone(),
    }
}

/// Shape bookkeeping shared by matmul evaluation and its adjoint.
struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

impl MatMulGeom {
    fn new(a: &[usize], b: &[usize], tb: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 || b.len() > 3 {
            return mismatch("matmul", a, b);
        }
        let (bk, bn) = {
            let (r, c) = (b[b.len() - 2], b[b.len() - 1]);
            if tb {
                (c, r)
            } else {
                (r, c)
            }
        };
        let k = a[a.len() - 1];
        if k != bk {
            return mismatch("matmul", a, b);
        }
        if b.len() == 2 {
            let rows: usize = a[..a.len() - 1].iter().product();
            let mut out_shape = a[..a.len() - 1].to_vec();
            out_shape.push(bn);
            Ok(Self {
                batch: 1,
                m: rows,
                k,
                n: bn,
                shared_rhs: true,
                out_shape,
            })
        } else {
            if a.len() != 3 || a[0] != b[0] {
                return mismatch("matmul", a, b);
            }
            Ok(Self {
                batch: a[0],
                m: a[1],
                k,
                n: bn,
                shared_rhs: false,
                out_shape: vec![a[0], a[1], bn],
            })
        }
    }

    fn rhs<'a, T>(&self, data: &'a [T], bi: usize) -> &'a [T] {
        if self.shared_rhs {
            data
        } else {
            let s = self.k * self.n;
            &data[bi * s..(bi + 1) * s]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dot_self_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", t(&[2], &[1.0, 2.0]), true).unwrap();
        let l = g.dot(w, w).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn log_exp_chain_is_identity() {
        for a in [-3.0f64, 0.0, 2.5] {
            let mut g = Graph::new();
            let x = g.param("a", Tensor::scalar(a), true).unwrap();
            let e = g.exp(x).unwrap();
            let l = g.log(e).unwrap();
            let grads = g.backward(l).unwrap();
            assert!((grads.get("a").unwrap().item() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity_returns_vector() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let v = g.constant(t(&[2, 1], &[0.3, -7.0]));
        let y = g.matmul(i2, v).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -7.0]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", t(&[2], &[1.0, 2.0]), true).unwrap();
        let e = g.exp(w).unwrap();
        assert!(matches!(g.backward(e), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_and_detached_leaves_absent() {
        let mut g = Graph::new();
        let w = g.param("w", t(&[2], &[1.0, 2.0]), true).unwrap();
        let f = g.param("frozen", t(&[2], &[3.0, 4.0]), false).unwrap();
        let d = g.param("detached", t(&[2], &[5.0, 6.0]), true).unwrap();
        let sd = g.stop_gradient(d).unwrap();
        let a = g.dot(w, f).unwrap();
        let b = g.dot(w, sd).unwrap();
        let l = g.add(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.names().collect::<Vec<_>>(), vec!["w"]);
        assert_eq!(grads.get("w").unwrap().data(), &[8.0, 10.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1000.0, 2.0, 1001.0]));
        let s = g.softmax(x, Some(vec![true, true, false])).unwrap();
        let v = g.value(s).data().to_vec();
        assert_eq!(v[2], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
        assert!(g.value(s).is_finite());
    }

    #[test]
    fn forward_is_deterministic_and_rebinds() {
        let mut g = Graph::new();
        let w = g.param("w", t(&[2], &[1.0, 2.0]), true).unwrap();
        let l = g.dot(w, w).unwrap();
        let a = g.forward(&[("w", t(&[2], &[3.0, 4.0]))], l).unwrap();
        let b = g.forward(&[], l).unwrap();
        assert_eq!(a.item(), 25.0);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let mut g = Graph::new();
        let a = g.param("a", t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let b = g.param("b", t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]), true).unwrap();
        let c = g.concat(vec![a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 2]);
        assert_eq!(
            g.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let n = g.narrow(c, 1, 0, 1).unwrap();
        assert_eq!(g.value(n).data(), g.value(a).data());
    }
}
