//! Reverse-mode differentiation over a recorded operation trace.
//!
//! A [`Graph`] is built once (append-only, so every node's inputs precede
//! it) and can then be evaluated against any set of leaf [`Bindings`].
//! Gradients are available with respect to any differentiable leaf, which
//! covers both model parameters and perturbation inputs.

use crate::error::{Error, Result};
use crate::tensor::{self, expect_matrix, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf { name: String, differentiable: bool },
    MatMul(NodeId, NodeId),
    /// `x[n,k] · w[k,m] + b[m]`
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    Mean(NodeId),
    Sum(NodeId),
    /// `[n,d] -> [n]`
    RowNorm(NodeId),
    /// Whole-tensor L2 norm to a scalar.
    Norm(NodeId),
    /// Per-example softmax cross-entropy, `[n,K] x [n] -> [n]`. Labels are
    /// integer-valued floats bound to a non-differentiable leaf.
    SoftmaxXent { logits: NodeId, labels: NodeId },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatCols(..) => "concat_cols",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::RowNorm(_) => "row_norm",
            Op::Norm(_) => "norm",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf { .. } => vec![],
            Op::Relu(a) | Op::Tanh(a) | Op::Scale(a, _) | Op::Mean(a) | Op::Sum(a) => vec![a],
            Op::RowNorm(a) | Op::Norm(a) => vec![a],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::ConcatCols(a, b) => vec![a, b],
            Op::Affine { x, w, b } => vec![x, w, b],
            Op::SoftmaxXent { logits, labels } => vec![logits, labels],
        }
    }
}

/// Operation trace. Nodes are only ever appended, so the trace is acyclic
/// and topologically ordered by construction.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, name: impl Into<String>, differentiable: bool) -> NodeId {
        self.push(Op::Leaf {
            name: name.into(),
            differentiable,
        })
    }

    /// Differentiable leaf.
    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.leaf(name, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.leaf(name, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols(a, b))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowNorm(a))
    }
    pub fn norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Norm(a))
    }
    pub fn softmax_xent(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxXent { logits, labels })
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    /// Explicit output, or the most recently added node.
    pub fn output(&self) -> NodeId {
        self.output.unwrap_or(NodeId(self.nodes.len().saturating_sub(1)))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0]
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Op::Leaf { .. }))
            .map(|(i, _)| NodeId(i))
    }

    /// Run the trace forward, keeping every intermediate value for a later
    /// backward pass.
    pub fn evaluate<'a, T: Scalar>(&'a self, bindings: &'a Bindings<'a, T>) -> Result<Evaluation<'a, T>> {
        let mut values: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for (i, op) in self.nodes.iter().enumerate() {
            let value = match op {
                Op::Leaf { name, .. } => {
                    if bindings.get(NodeId(i)).is_none() {
                        return Err(Error::UnboundLeaf { name: name.clone() });
                    }
                    None
                }
                _ => {
                    let v = {
                        let get = |id: NodeId| -> &Tensor<T> {
                            match &values[id.0] {
                                Some(t) => t,
                                None => bindings.get(id).expect("leaf bound"),
                            }
                        };
                        eval_op(op, &get)?
                    };
                    if !v.is_finite() {
                        return Err(Error::NonFinite { op: op.name() });
                    }
                    Some(v)
                }
            };
            values.push(value);
        }
        Ok(Evaluation {
            graph: self,
            bindings,
            values,
        })
    }
}

/// Leaf values for one evaluation, borrowed from the caller.
#[derive(Debug, Default)]
pub struct Bindings<'a, T: Scalar> {
    slots: Vec<Option<&'a Tensor<T>>>,
}

impl<'a, T: Scalar> Bindings<'a, T> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn bind(&mut self, id: NodeId, value: &'a Tensor<T>) -> &mut Self {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0] = Some(value);
        self
    }

    pub fn with(mut self, id: NodeId, value: &'a Tensor<T>) -> Self {
        self.bind(id, value);
        self
    }

    pub fn get(&self, id: NodeId) -> Option<&'a Tensor<T>> {
        self.slots.get(id.0).copied().flatten()
    }
}

pub struct Evaluation<'a, T: Scalar> {
    graph: &'a Graph,
    bindings: &'a Bindings<'a, T>,
    values: Vec<Option<Tensor<T>>>,
}

/// Gradients keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<(NodeId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.iter().find(|(k, _)| *k == id).map(|(_, t)| t)
    }

    /// Remove and return the gradient for `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        let pos = self.grads.iter().position(|(k, _)| *k == id)?;
        Some(self.grads.swap_remove(pos).1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads.iter().map(|(k, t)| (*k, t))
    }
}

impl<'a, T: Scalar> Evaluation<'a, T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.values[id.0] {
            Some(t) => t,
            None => self.bindings.get(id).expect("leaf bound"),
        }
    }

    pub fn output(&self) -> &Tensor<T> {
        self.value(self.graph.output())
    }

    /// Reverse-accumulate d(output)/d(leaf) for each leaf in `wrt`.
    pub fn backward(&self, wrt: &[NodeId]) -> Result<Gradients<T>> {
        let graph = self.graph;
        let out_id = graph.output();
        let out = self.value(out_id);
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput {
                shape: out.shape().to_vec(),
            });
        }
        let mut needs = vec![false; out_id.0 + 1];
        for &id in wrt {
            match graph.nodes.get(id.0) {
                Some(Op::Leaf { differentiable, name }) => {
                    if !differentiable {
                        return Err(Error::NotDifferentiable { name: name.clone() });
                    }
                    if id.0 <= out_id.0 {
                        needs[id.0] = true;
                    }
                }
                _ => return Err(Error::NotALeaf(id.0)),
            }
        }
        for i in 0..=out_id.0 {
            if !needs[i] {
                needs[i] = graph.nodes[i].inputs().iter().any(|p| needs[p.0]);
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out_id.0 + 1];
        grads[out_id.0] = Some(Tensor::full(out.shape(), T::one()));
        for i in (0..=out_id.0).rev() {
            if !needs[i] {
                continue;
            }
            let op = &graph.nodes[i];
            if matches!(op, Op::Leaf { .. }) {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            for (input, g) in self.local_grads(op, NodeId(i), &upstream, &needs)? {
                accumulate(&mut grads[input.0], g)?;
            }
        }

        let mut result = Vec::with_capacity(wrt.len());
        for &id in wrt {
            let g = if id.0 <= out_id.0 {
                grads[id.0].clone()
            } else {
                None
            };
            let g = g.unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
            result.push((id, g));
        }
        Ok(Gradients { grads: result })
    }

    fn local_grads(
        &self,
        op: &Op,
        id: NodeId,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let mut out = Vec::with_capacity(3);
        let want = |n: NodeId| needs[n.0];
        match *op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = tensor::transpose(self.value(b))?;
                    out.push((a, tensor::matmul(g, &bt)?));
                }
                if want(b) {
                    let at = tensor::transpose(self.value(a))?;
                    out.push((b, tensor::matmul(&at, g)?));
                }
            }
            Op::Affine { x, w, b } => {
                if want(x) {
                    let wt = tensor::transpose(self.value(w))?;
                    out.push((x, tensor::matmul(g, &wt)?));
                }
                if want(w) {
                    let xt = tensor::transpose(self.value(x))?;
                    out.push((w, tensor::matmul(&xt, g)?));
                }
                if want(b) {
                    let (n, m) = expect_matrix("affine", g)?;
                    let mut db = vec![T::zero(); m];
                    for r in 0..n {
                        for (acc, &v) in db.iter_mut().zip(g.row(r)) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((b, Tensor::vector(db)));
                }
            }
            Op::Relu(a) => {
                let x = self.value(a);
                out.push((
                    a,
                    g.zip_map(x, "relu", |gv, xv| if xv > T::zero() { gv } else { T::zero() })?,
                ));
            }
            Op::Tanh(a) => {
                let y = self.value(id);
                out.push((a, g.zip_map(y, "tanh", |gv, yv| gv * (T::one() - yv * yv))?));
            }
            Op::Add(a, b) => {
                if want(a) {
                    out.push((a, g.clone()));
                }
                if want(b) {
                    out.push((b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a, g.clone()));
                }
                if want(b) {
                    out.push((b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a, g.zip_map(self.value(b), "mul", |gv, bv| gv * bv)?));
                }
                if want(b) {
                    out.push((b, g.zip_map(self.value(a), "mul", |gv, av| gv * av)?));
                }
            }
            Op::Scale(a, c) => out.push((a, g.scale(T::of(c)))),
            Op::ConcatCols(a, b) => {
                let p = self.value(a).cols();
                let q = self.value(b).cols();
                let n = g.rows();
                if want(a) {
                    let mut da = Vec::with_capacity(n * p);
                    for r in 0..n {
                        da.extend_from_slice(&g.row(r)[..p]);
                    }
                    out.push((a, Tensor::new(vec![n, p], da)?));
                }
                if want(b) {
                    let mut db = Vec::with_capacity(n * q);
                    for r in 0..n {
                        db.extend_from_slice(&g.row(r)[p..]);
                    }
                    out.push((b, Tensor::new(vec![n, q], db)?));
                }
            }
            Op::Mean(a) => {
                let x = self.value(a);
                let v = g.item() / T::of(x.len() as f64);
                out.push((a, Tensor::full(x.shape(), v)));
            }
            Op::Sum(a) => {
                let x = self.value(a);
                out.push((a, Tensor::full(x.shape(), g.item())));
            }
            Op::RowNorm(a) => {
                let x = self.value(a);
                let y = self.value(id);
                let mut dx = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let norm = y.data()[r];
                    if norm > T::zero() {
                        let scale = g.data()[r] / norm;
                        for (d, &xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                            *d = xv * scale;
                        }
                    }
                }
                out.push((a, dx));
            }
            Op::Norm(a) => {
                let x = self.value(a);
                let norm = self.value(id).item();
                let dx = if norm > T::zero() {
                    x.scale(g.item() / norm)
                } else {
                    Tensor::zeros(x.shape())
                };
                out.push((a, dx));
            }
            Op::SoftmaxXent { logits, labels } => {
                let z = self.value(logits);
                let y = self.value(labels);
                let k = z.cols();
                let mut dz = Tensor::zeros(z.shape());
                for r in 0..z.rows() {
                    let row = z.row(r);
                    let lse = tensor::log_sum_exp(row);
                    let gr = g.data()[r];
                    let label = y.data()[r].as_f64() as usize;
                    for (c, d) in dz.row_mut(r).iter_mut().enumerate().take(k) {
                        let p = (row[c] - lse).exp();
                        let target = if c == label { T::one() } else { T::zero() };
                        *d = gr * (p - target);
                    }
                }
                out.push((logits, dz));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn eval_op<'v, T: Scalar>(op: &Op, get: &dyn Fn(NodeId) -> &'v Tensor<T>) -> Result<Tensor<T>> {
    Ok(match *op {
        Op::Leaf { .. } => unreachable!("leaves are bound, not evaluated"),
        Op::MatMul(a, b) => tensor::matmul(get(a), get(b))?,
        Op::Affine { x, w, b } => tensor::affine(get(x), get(w), get(b))?,
        Op::Relu(a) => tensor::relu(get(a)),
        Op::Tanh(a) => tensor::tanh(get(a)),
        Op::Add(a, b) => get(a).add(get(b))?,
        Op::Sub(a, b) => get(a).sub(get(b))?,
        Op::Mul(a, b) => get(a).zip_map(get(b), "mul", |x, y| x * y)?,
        Op::Scale(a, c) => get(a).scale(T::of(c)),
        Op::ConcatCols(a, b) => tensor::concat_cols(get(a), get(b))?,
        Op::Mean(a) => Tensor::scalar(get(a).mean()),
        Op::Sum(a) => Tensor::scalar(get(a).sum()),
        Op::RowNorm(a) => tensor::row_norms(get(a))?,
        Op::Norm(a) => Tensor::scalar(tensor::l2(get(a).data())),
        Op::SoftmaxXent { logits, labels } => {
            let z = get(logits);
            let y = get(labels);
            let (n, k) = expect_matrix("softmax_xent", z)?;
            if y.shape() != [n] {
                return Err(Error::ShapeMismatch {
                    op: "softmax_xent",
                    shapes: vec![z.shape().to_vec(), y.shape().to_vec()],
                });
            }
            let mut losses = Vec::with_capacity(n);
            for r in 0..n {
                let label = y.data()[r].as_f64();
                if label.fract() != 0.0 || label < 0.0 || label >= k as f64 {
                    return Err(Error::LabelOutOfRange { label, classes: k });
                }
                let row = z.row(r);
                losses.push(tensor::log_sum_exp(row) - row[label as usize]);
            }
            Tensor::vector(losses)
        }
    })
}

/// Evaluate the graph output.
pub fn forward<T: Scalar>(graph: &Graph, bindings: &Bindings<'_, T>) -> Result<Tensor<T>> {
    Ok(graph.evaluate(bindings)?.output().clone())
}

/// Evaluate and differentiate the scalar graph output with respect to `wrt`.
pub fn backward<T: Scalar>(graph: &Graph, bindings: &Bindings<'_, T>, wrt: &[NodeId]) -> Result<Gradients<T>> {
    graph.evaluate(bindings)?.backward(wrt)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let step = T::of(h);
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (step + step);
    }
    Ok(grad)
}
