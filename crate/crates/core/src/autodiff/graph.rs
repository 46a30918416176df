use super::{AutodiffError, Tensor};
use crate::Scalar;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Recorded operation. Inputs live in the owning node.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(T),
    Offset(T),
    /// scalar node times tensor node
    ScaleBy,
    Tanh,
    Relu,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Sqrt,
    Sin,
    Cos,
    Sum,
    Mean,
    SqNorm,
    Norm,
    MinOverAxis { axis: usize, argmin: Vec<usize> },
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize, len: usize },
    Reshape,
    Transpose,
    Clamp { lo: T, hi: T },
    TileRows { rows: usize },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::ScaleBy => "scale_by",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SqNorm => "sqnorm",
            Op::Norm => "norm",
            Op::MinOverAxis { .. } => "min_over_axis",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
            Op::Clamp { .. } => "clamp",
            Op::TileRows { .. } => "tile_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Tape of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumer and the node list is a valid topological order. A graph is
/// meant to be built and consumed on one thread.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], value)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, vec![], value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn unary(&mut self, op: Op<T>, x: Var, f: impl Fn(T) -> T) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect());
        self.push(op, vec![x], out)
    }

    fn binary(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var, AutodiffError> {
        self.same_shape(op.name(), a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(op, vec![a, b], out))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        Ok(self.push(Op::MatMul, vec![a, b], Tensor::from_parts(vec![sa[0], sb[1]], data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    pub fn offset(&mut self, x: Var, c: T) -> Var {
        self.unary(Op::Offset(c), x, |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// Multiplies tensor `x` by the single-element node `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var, AutodiffError> {
        if !self.value(s).is_scalar() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(s).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let c = self.scalar(s);
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect());
        Ok(self.push(Op::ScaleBy, vec![s, x], out))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x, |v| v.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| v.max(T::zero()))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.unary(Op::Exp, x, |v| v.exp());
        if let Some(index) = self.value(v).data().iter().position(|e| !e.is_finite()) {
            self.nodes.pop();
            return Err(AutodiffError::Domain { op: "exp", detail: format!("overflow at index {index}") });
        }
        Ok(v)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        if let Some(index) = self.value(x).data().iter().position(|&v| v <= T::zero()) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive input {} at index {index}", self.value(x).data()[index]),
            });
        }
        Ok(self.unary(Op::Log, x, |v| v.ln()))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Op::Softplus, x, softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        if let Some(index) = self.value(x).data().iter().position(|&v| v < T::zero()) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                detail: format!("negative input {} at index {index}", self.value(x).data()[index]),
            });
        }
        Ok(self.unary(Op::Sqrt, x, |v| v.sqrt()))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Op::Sin, x, |v| v.sin())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Op::Cos, x, |v| v.cos())
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(Op::Clamp { lo, hi }, x, |v| v.max(lo).min(hi))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(AutodiffError::Domain { op: "mean", detail: "empty tensor".into() });
        }
        let m = xv.sum() / T::lit(xv.len() as f64);
        Ok(self.push(Op::Mean, vec![x], Tensor::scalar(m)))
    }

    /// Squared Euclidean norm of all elements.
    pub fn sqnorm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |s, &v| s + v * v);
        self.push(Op::SqNorm, vec![x], Tensor::scalar(s))
    }

    /// Euclidean norm of all elements. The gradient at the origin is taken
    /// as zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |s, &v| s + v * v);
        self.push(Op::Norm, vec![x], Tensor::scalar(s.sqrt()))
    }

    /// Minimum along `axis`, removing that axis. Ties resolve to the lowest
    /// index; the gradient flows only to the selected element.
    pub fn min_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(AutodiffError::Axis { op: "min_over_axis", axis, shape });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmin = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = data[o * dim * inner + i];
                for a in 1..dim {
                    let v = data[(o * dim + a) * inner + i];
                    if v < best_v {
                        best = a;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmin.push(best);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(Op::MinOverAxis { axis, argmin }, vec![x], Tensor::from_parts(out_shape, out)))
    }

    /// Index chosen by a `min_over_axis` node, per output element.
    pub fn argmin(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MinOverAxis { argmin, .. } => Some(argmin),
            _ => None,
        }
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = match xs.first() {
            Some(&f) => self.shape(f).to_vec(),
            None => return Err(AutodiffError::Domain { op: "concat", detail: "no inputs".into() }),
        };
        if axis >= first.len() {
            return Err(AutodiffError::Axis { op: "concat", axis, shape: first });
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &sz) in xs.iter().zip(&sizes) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Op::Concat { axis, sizes }, xs.to_vec(), Tensor::from_parts(shape, out)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AutodiffError::Axis { op: "slice", axis, shape });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Op::Slice { axis, start, len }, vec![x], Tensor::from_parts(out_shape, out)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::Axis { op: "transpose", axis: 1, shape: s });
        }
        let data = transpose_raw(self.value(x).data(), s[0], s[1]);
        Ok(self.push(Op::Transpose, vec![x], Tensor::from_parts(vec![s[1], s[0]], data)))
    }

    /// Repeats a `[1, n]` row `rows` times. This is the only row broadcast
    /// the graph offers and it must be requested explicitly.
    pub fn tile_rows(&mut self, x: Var, rows: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != 1 {
            return Err(AutodiffError::ShapeMismatch { op: "tile_rows", lhs: s, rhs: vec![1, 0] });
        }
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(rows * row.len());
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        Ok(self.push(Op::TileRows { rows }, vec![x], Tensor::from_parts(vec![rows, s[1]], data)))
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, AutodiffError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| match (&self.nodes[id].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(self.nodes[id].value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let x = node.inputs[0];
        let xv = self.value(x).data();
        let out = node.value.data();
        let elementwise = |f: &dyn Fn(usize) -> T| -> Vec<T> { (0..g.len()).map(f).collect() };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul => {
                let b = node.inputs[1];
                let (sa, sb) = (self.shape(x), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(x) {
                    let bt = transpose_raw(self.value(b).data(), k, n);
                    self.accumulate(grads, x, matmul_raw(g, &bt, m, n, k));
                }
                if self.wants(b) {
                    let at = transpose_raw(xv, m, k);
                    self.accumulate(grads, b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add => {
                self.accumulate(grads, x, g.to_vec());
                self.accumulate(grads, node.inputs[1], g.to_vec());
            }
            Op::Sub => {
                self.accumulate(grads, x, g.to_vec());
                self.accumulate(grads, node.inputs[1], g.iter().map(|&v| -v).collect());
            }
            Op::Mul => {
                let b = node.inputs[1];
                let bv = self.value(b).data();
                if self.wants(x) {
                    self.accumulate(grads, x, elementwise(&|i| g[i] * bv[i]));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, elementwise(&|i| g[i] * xv[i]));
                }
            }
            Op::Scale(c) => self.accumulate(grads, x, g.iter().map(|&v| v * *c).collect()),
            Op::Offset(_) | Op::Reshape => self.accumulate(grads, x, g.to_vec()),
            Op::ScaleBy => {
                // x is the scalar, inputs[1] the tensor
                let t = node.inputs[1];
                let tv = self.value(t).data();
                let c = xv[0];
                if self.wants(x) {
                    let s = g.iter().zip(tv).fold(T::zero(), |s, (&gi, &ti)| s + gi * ti);
                    self.accumulate(grads, x, vec![s]);
                }
                if self.wants(t) {
                    self.accumulate(grads, t, g.iter().map(|&gi| gi * c).collect());
                }
            }
            Op::Tanh => self.accumulate(grads, x, elementwise(&|i| g[i] * (T::one() - out[i] * out[i]))),
            Op::Relu => self.accumulate(
                grads,
                x,
                elementwise(&|i| if xv[i] > T::zero() { g[i] } else { T::zero() }),
            ),
            Op::Exp => self.accumulate(grads, x, elementwise(&|i| g[i] * out[i])),
            Op::Log => self.accumulate(grads, x, elementwise(&|i| g[i] / xv[i])),
            Op::Softplus => self.accumulate(grads, x, elementwise(&|i| g[i] * sigmoid(xv[i]))),
            Op::Sigmoid => self.accumulate(grads, x, elementwise(&|i| g[i] * out[i] * (T::one() - out[i]))),
            Op::Sqrt => self.accumulate(
                grads,
                x,
                elementwise(&|i| {
                    if out[i] > T::zero() {
                        g[i] / (T::lit(2.0) * out[i])
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Sin => self.accumulate(grads, x, elementwise(&|i| g[i] * xv[i].cos())),
            Op::Cos => self.accumulate(grads, x, elementwise(&|i| -g[i] * xv[i].sin())),
            Op::Clamp { lo, hi } => self.accumulate(
                grads,
                x,
                elementwise(&|i| if xv[i] >= *lo && xv[i] <= *hi { g[i] } else { T::zero() }),
            ),
            Op::Sum => self.accumulate(grads, x, vec![g[0]; xv.len()]),
            Op::Mean => {
                let c = g[0] / T::lit(xv.len() as f64);
                self.accumulate(grads, x, vec![c; xv.len()]);
            }
            Op::SqNorm => {
                let two = T::lit(2.0) * g[0];
                self.accumulate(grads, x, xv.iter().map(|&v| two * v).collect());
            }
            Op::Norm => {
                let n = out[0];
                let contrib = if n > T::zero() {
                    xv.iter().map(|&v| g[0] * v / n).collect()
                } else {
                    vec![T::zero(); xv.len()]
                };
                self.accumulate(grads, x, contrib);
            }
            Op::MinOverAxis { axis, argmin } => {
                let (outer, dim, inner) = split_axis(self.shape(x), *axis);
                let mut contrib = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = o * inner + i;
                        contrib[(o * dim + argmin[j]) * inner + i] = g[j];
                    }
                }
                self.accumulate(grads, x, contrib);
            }
            Op::Concat { axis, sizes } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for (&input, &sz) in node.inputs.iter().zip(sizes) {
                    if self.wants(input) {
                        let mut contrib = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            contrib.extend_from_slice(&g[base..base + sz * inner]);
                        }
                        self.accumulate(grads, input, contrib);
                    }
                    offset += sz;
                }
            }
            Op::Slice { axis, start, len } => {
                let (outer, dim, inner) = split_axis(self.shape(x), *axis);
                let mut contrib = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    contrib[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, x, contrib);
            }
            Op::Transpose => {
                let s = self.shape(x);
                self.accumulate(grads, x, transpose_raw(g, s[1], s[0]));
            }
            Op::TileRows { rows } => {
                let cols = xv.len();
                let mut contrib = vec![T::zero(); cols];
                for r in 0..*rows {
                    for c in 0..cols {
                        contrib[c] = contrib[c] + g[r * cols + c];
                    }
                }
                self.accumulate(grads, x, contrib);
            }
        }
    }
}

/// Gradients of a root with respect to every leaf that influenced it.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` is not a leaf reachable from the
    /// root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v` with zeros substituted for unreachable leaves.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Leaf id and gradient for every reached leaf.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(id, g)| g.as_ref().map(|g| (Var(id), g)))
    }
}
