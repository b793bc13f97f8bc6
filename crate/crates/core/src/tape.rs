//! Tape-based reverse-mode automatic differentiation.
//!
//! Every graph operation appends a node holding its cached forward value.
//! Inputs always precede the node that consumes them, so a single reverse
//! sweep from the root accumulates all gradients.
//!
//! Subgradient conventions: ReLU has derivative 0 at 0, max reductions route
//! the gradient to the first maximiser, and norms have subgradient 0 at the
//! zero vector.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{argmax, softmax, Norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// Matrix plus a vector added to every column.
    AddCol(NodeId, NodeId),
    MulConst(NodeId, Tensor<T>),
    /// Row `i` multiplied by a constant factor `f[i]`.
    ScaleRows(NodeId, Vec<T>),
    Scale(NodeId, T),
    Relu(NodeId),
    Transpose(NodeId),
    /// `r x M` matrix to `r x 2M`: columns `(a W_m, -a W_m)` for each `m`.
    SignedColumns(NodeId, T),
    MaxReduce(NodeId, usize),
    RowMax(NodeId, Vec<usize>),
    SelectColumn(NodeId, usize),
    Index(NodeId, usize),
    Sum(NodeId),
    LogSumExp(NodeId),
    Softmax(NodeId),
    Norm(NodeId, Norm),
    RowNorms(NodeId, Norm),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Hadamard(a, b) | AddCol(a, b) => vec![*a, *b],
            MulConst(a, _)
            | ScaleRows(a, _)
            | Scale(a, _)
            | Relu(a)
            | Transpose(a)
            | SignedColumns(a, _)
            | MaxReduce(a, _)
            | RowMax(a, _)
            | SelectColumn(a, _)
            | Index(a, _)
            | Sum(a)
            | LogSumExp(a)
            | Softmax(a)
            | Norm(a, _)
            | RowNorms(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Single-owner computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value.item()
    }

    /// Input ids of a node, all smaller than `id`.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    /// Adds vector `v` to every column of matrix `m` (or to vector `m`).
    pub fn add_col(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (self.value(m), self.value(v));
        if vv.rank() != 1 || mv.rank() == 0 || mv.rows() != vv.len() {
            return Err(self.mismatch("add_col", m, v));
        }
        let cols = mv.cols();
        let mut out = mv.clone();
        for (i, &b) in vv.data().iter().enumerate() {
            for o in &mut out.data_mut()[i * cols..(i + 1) * cols] {
                *o = *o + b;
            }
        }
        Ok(self.push(Op::AddCol(m, v), out))
    }

    /// Elementwise product with a constant (no gradient flows into `c`).
    pub fn mul_const(&mut self, a: NodeId, c: Tensor<T>) -> Result<NodeId> {
        let v = self.value(a).hadamard(&c)?;
        Ok(self.push(Op::MulConst(a, c), v))
    }

    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<T>) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() == 0 || av.rows() != factors.len() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let cols = av.cols();
        let mut out = av.clone();
        for (i, &f) in factors.iter().enumerate() {
            for o in &mut out.data_mut()[i * cols..(i + 1) * cols] {
                *o = *o * f;
            }
        }
        Ok(self.push(Op::ScaleRows(a, factors), out))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -T::one())
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        self.push(Op::Relu(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::InvalidShape(av.shape().to_vec(), "transpose of a non-matrix"));
        }
        let v = av.transpose();
        Ok(self.push(Op::Transpose(a), v))
    }

    /// Branch columns of the first layer: for an `r x M` matrix `W`, the
    /// `r x 2M` matrix whose columns `2m` and `2m + 1` are `a W_m` and `-a W_m`.
    pub fn signed_columns(&mut self, w: NodeId, a: T) -> Result<NodeId> {
        let wv = self.value(w);
        if wv.rank() != 2 {
            return Err(Error::InvalidShape(wv.shape().to_vec(), "signed_columns of a non-matrix"));
        }
        let (r, m) = (wv.rows(), wv.cols());
        let mut data = Vec::with_capacity(r * 2 * m);
        for i in 0..r {
            for j in 0..m {
                let x = wv.at(i, j) * a;
                data.push(x);
                data.push(-x);
            }
        }
        let v = Tensor::matrix(r, 2 * m, data)?;
        Ok(self.push(Op::SignedColumns(w, a), v))
    }

    /// Maximum of all entries; the gradient goes to the first maximiser.
    pub fn max_reduce(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let i = av.argmax();
        let v = Tensor::scalar(av.data()[i]);
        self.push(Op::MaxReduce(a, i), v)
    }

    /// Row-wise maximum of a matrix, first maximiser per row.
    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::InvalidShape(av.shape().to_vec(), "row_max of a non-matrix"));
        }
        let idx: Vec<usize> = (0..av.rows()).map(|i| argmax(av.row(i))).collect();
        let v = Tensor::vector(idx.iter().enumerate().map(|(i, &j)| av.at(i, j)).collect());
        Ok(self.push(Op::RowMax(a, idx), v))
    }

    pub fn select_column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() != 2 || j >= av.cols() {
            return Err(Error::InvalidShape(av.shape().to_vec(), "column index out of range"));
        }
        let v = Tensor::vector(av.column(j));
        Ok(self.push(Op::SelectColumn(a, j), v))
    }

    /// Entry `i` of a vector as a scalar.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() != 1 || i >= av.len() {
            return Err(Error::InvalidShape(av.shape().to_vec(), "index out of range"));
        }
        let v = Tensor::scalar(av.data()[i]);
        Ok(self.push(Op::Index(a, i), v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() != 1 {
            return Err(Error::InvalidShape(av.shape().to_vec(), "logsumexp of a non-vector"));
        }
        let v = Tensor::scalar(av.logsumexp());
        Ok(self.push(Op::LogSumExp(a), v))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() != 1 {
            return Err(Error::InvalidShape(av.shape().to_vec(), "softmax of a non-vector"));
        }
        let v = Tensor::vector(softmax(av.data()));
        Ok(self.push(Op::Softmax(a), v))
    }

    pub fn norm(&mut self, a: NodeId, p: Norm) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).lp_norm(p)?);
        Ok(self.push(Op::Norm(a, p), v))
    }

    /// Lp norm of every row of a matrix.
    pub fn row_norms(&mut self, a: NodeId, p: Norm) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::InvalidShape(av.shape().to_vec(), "row_norms of a non-matrix"));
        }
        let v = Tensor::vector((0..av.rows()).map(|i| p.of(av.row(i))).collect());
        Ok(self.push(Op::RowNorms(a, p), v))
    }

    /// Sum of scalar nodes, as a chain of additions.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms.split_first().ok_or(Error::Empty)?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from a scalar root. Afterwards [`Tape::grad`] returns the
    /// gradient of the root with respect to any node recorded before it.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.nodes[i].value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient slot of a node after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, delta: Tensor<T>| {
            let slot = &mut grads[id.0];
            match slot {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + *b;
                    }
                }
                None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if bv.rank() == 1 {
                    // c = A b: dA = g b^T, db = A^T g
                    let (m, n) = (av.rows(), av.cols());
                    let mut da = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let gr = g.data()[r];
                        da.extend(bv.data().iter().map(|&x| gr * x));
                    }
                    acc(*a, Tensor::matrix(m, n, da).expect("shape"));
                    acc(*b, av.transpose().matmul(g).expect("shape"));
                } else {
                    acc(*a, g.matmul(&bv.transpose()).expect("shape"));
                    acc(*b, av.transpose().matmul(g).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.neg());
            }
            Op::Hadamard(a, b) => {
                acc(*a, g.hadamard(val(*b)).expect("shape"));
                acc(*b, g.hadamard(val(*a)).expect("shape"));
            }
            Op::AddCol(m, v) => {
                acc(*m, g.clone());
                let cols = g.cols();
                let dv: Vec<T> = (0..g.rows())
                    .map(|r| g.data()[r * cols..(r + 1) * cols].iter().copied().sum())
                    .collect();
                acc(*v, Tensor::vector(dv));
            }
            Op::MulConst(a, c) => acc(*a, g.hadamard(c).expect("shape")),
            Op::ScaleRows(a, f) => {
                let cols = g.cols();
                let mut d = g.clone();
                for (r, &fr) in f.iter().enumerate() {
                    for x in &mut d.data_mut()[r * cols..(r + 1) * cols] {
                        *x = *x * fr;
                    }
                }
                acc(*a, d);
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), "relu", |gi, x| gi * x.step()).expect("shape");
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SignedColumns(w, s) => {
                let wv = val(*w);
                let (r, m) = (wv.rows(), wv.cols());
                let mut d = Vec::with_capacity(r * m);
                for i in 0..r {
                    for j in 0..m {
                        d.push(*s * (g.at(i, 2 * j) - g.at(i, 2 * j + 1)));
                    }
                }
                acc(*w, Tensor::matrix(r, m, d).expect("shape"));
            }
            Op::MaxReduce(a, idx) => {
                let mut d = Tensor::zeros(val(*a).shape());
                d.data_mut()[*idx] = g.item();
                acc(*a, d);
            }
            Op::RowMax(a, idx) => {
                let av = val(*a);
                let cols = av.cols();
                let mut d = Tensor::zeros(av.shape());
                for (r, &j) in idx.iter().enumerate() {
                    d.data_mut()[r * cols + j] = g.data()[r];
                }
                acc(*a, d);
            }
            Op::SelectColumn(a, j) => {
                let av = val(*a);
                let cols = av.cols();
                let mut d = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    d.data_mut()[r * cols + j] = g.data()[r];
                }
                acc(*a, d);
            }
            Op::Index(a, k) => {
                let mut d = Tensor::zeros(val(*a).shape());
                d.data_mut()[*k] = g.item();
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::LogSumExp(a) => {
                let s = softmax(val(*a).data());
                let gi = g.item();
                acc(*a, Tensor::vector(s.into_iter().map(|x| x * gi).collect()));
            }
            Op::Softmax(a) => {
                let s = node.value.data();
                let gs: T = s.iter().zip(g.data()).map(|(&si, &gi)| si * gi).sum();
                let d = s.iter().zip(g.data()).map(|(&si, &gi)| si * (gi - gs)).collect();
                acc(*a, Tensor::vector(d));
            }
            Op::Norm(a, p) => {
                let av = val(*a);
                let d = norm_subgradient(av.data(), *p, node.value.item());
                acc(*a, Tensor::vector(d.into_iter().map(|x| x * g.item()).collect()));
            }
            Op::RowNorms(a, p) => {
                let av = val(*a);
                let mut d = Vec::with_capacity(av.len());
                for r in 0..av.rows() {
                    let sub = norm_subgradient(av.row(r), *p, node.value.data()[r]);
                    d.extend(sub.into_iter().map(|x| x * g.data()[r]));
                }
                acc(*a, Tensor::matrix(av.rows(), av.cols(), d).expect("shape"));
            }
        }
    }
}

/// A subgradient of `‖v‖_p` at `v` (given its value), zero at the origin.
fn norm_subgradient<T: Real>(v: &[T], p: Norm, value: T) -> Vec<T> {
    let mut d = vec![T::zero(); v.len()];
    if value == T::zero() {
        return d;
    }
    match p {
        Norm::L1 => {
            for (di, &x) in d.iter_mut().zip(v) {
                *di = x.sign0();
            }
        }
        Norm::L2 => {
            for (di, &x) in d.iter_mut().zip(v) {
                *di = x / value;
            }
        }
        Norm::Inf => {
            let mut best = 0;
            for (i, x) in v.iter().enumerate() {
                if x.abs() > v[best].abs() {
                    best = i;
                }
            }
            d[best] = v[best].sign0();
        }
    }
    d
}
