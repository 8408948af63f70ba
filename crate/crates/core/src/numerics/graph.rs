//! Static computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once through its builder methods, which infer and
//! check every node's shape eagerly. Evaluation binds named parameters and
//! inputs, computes every node in insertion order and returns an
//! [`Evaluation`]; [`Graph::backward`] walks the same order in reverse.
//! Insertion order is a topological order because a node can only refer to
//! ids that already exist.

use std::collections::HashMap;

use super::tensor::{matmul_into, Tensor, TensorMap};
use super::NumericsError;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Elementwise scalar functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryFn {
    Sigmoid,
    Silu,
    /// tanh approximation
    Gelu,
    Tanh,
    Exp,
    Ln,
    /// `sin(sqrt(a)) / sqrt(a)` of a squared angle `a >= 0`.
    SinRatio,
    /// `(1 - cos(sqrt(a))) / a` of a squared angle `a >= 0`.
    CosRatio,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input(String),
    Param(String),
    Const(Tensor<T>),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    Shift(NodeId, T),
    Unary(NodeId, UnaryFn),
    Cross(NodeId, NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    LayerNorm(NodeId, T),
    SoftmaxRows(NodeId),
    Concat(Vec<NodeId>, Axis),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    RowCosine(NodeId, NodeId),
}

impl<T> Op<T> {
    fn any_operand(&self, f: impl Fn(NodeId) -> bool) -> bool {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => false,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Cross(a, b)
            | Op::RowCosine(a, b) => f(*a) || f(*b),
            Op::Conv1d { x, w, .. } => f(*x) || f(*w),
            Op::Concat(parts, _) => parts.iter().any(|&p| f(p)),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Unary(a, _)
            | Op::LayerNorm(a, _)
            | Op::SoftmaxRows(a)
            | Op::SliceCols(a, ..)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a) => f(*a),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Unary(..) => "unary",
            Op::Cross(..) => "cross",
            Op::Conv1d { .. } => "conv1d",
            Op::LayerNorm(..) => "layer_norm",
            Op::SoftmaxRows(_) => "softmax",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::RowCosine(..) => "row_cosine",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// An immutable-after-construction record of primitive operations.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, NodeId>,
    inputs: HashMap<String, NodeId>,
}

/// Values of every node from one forward evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.values[id.0].data()[0]
    }
}

/// Gradients of a scalar output with respect to every leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub params: TensorMap<T>,
    pub inputs: TensorMap<T>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            inputs: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.params.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn input_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.inputs.keys().cloned().collect();
        names.sort();
        names
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn err(&self, op: &str, detail: String) -> NumericsError {
        NumericsError::Shape {
            node: format!("#{} {}", self.nodes.len(), op),
            detail,
        }
    }

    fn leaf(&mut self, name: &str, shape: &[usize], param: bool) -> Result<NodeId, NumericsError> {
        let table = if param { &self.params } else { &self.inputs };
        if let Some(&id) = table.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(NumericsError::Shape {
                    node: format!("#{} {name}", id.0),
                    detail: format!("leaf redeclared with shape {shape:?}, was {:?}", self.nodes[id.0].shape),
                });
            }
            return Ok(id);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::InvalidShape { shape: shape.to_vec() });
        }
        let op = if param {
            Op::Param(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        let id = self.push(op, shape.to_vec());
        if param {
            self.params.insert(name.to_string(), id);
        } else {
            self.inputs.insert(name.to_string(), id);
        }
        Ok(id)
    }

    /// Declares (or looks up) a named input leaf.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericsError> {
        self.leaf(name, shape, false)
    }

    /// Declares (or looks up) a named trainable parameter leaf.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, NumericsError> {
        self.leaf(name, shape, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 {
            return Err(self.err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n]))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, k) = dims2(self.shape(a));
        let (n, k2) = dims2(self.shape(b));
        if k != k2 {
            return Err(self.err("matmul_t", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        Ok(self.push(Op::MatMulT(a, b), vec![m, n]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = dims2(self.shape(a));
        self.push(Op::Transpose(a), vec![c, r])
    }

    fn broadcast_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let (ra, ca) = dims2(sa);
        let (rb, cb) = dims2(sb);
        let r = match (ra, rb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(self.err(op, format!("cannot broadcast {sa:?} with {sb:?}"))),
        };
        let c = match (ca, cb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(self.err(op, format!("cannot broadcast {sa:?} with {sb:?}"))),
        };
        if sa.len() == 1 && sb.len() == 1 {
            Ok(vec![c])
        } else {
            Ok(vec![r, c])
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let s = self.broadcast_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let s = self.broadcast_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let s = self.broadcast_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let s = self.broadcast_shape("div", a, b)?;
        Ok(self.push(Op::Div(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), s)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn shift(&mut self, a: NodeId, c: T) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Shift(a, c), s)
    }

    pub fn unary(&mut self, a: NodeId, f: UnaryFn) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Unary(a, f), s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryFn::Sigmoid)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryFn::Silu)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryFn::Gelu)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Mul(a, a), s)
    }

    /// Row-wise 3-D cross product of two `[n, 3]` nodes.
    pub fn cross(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || dims2(&sa).1 != 3 {
            return Err(self.err("cross", format!("{sa:?} x {sb:?}, need matching [n, 3]")));
        }
        Ok(self.push(Op::Cross(a, b), vec![dims2(&sa).0, 3]))
    }

    /// Temporal convolution of `x: [L, Cin]` with `w: [K, Cin, Cout]`,
    /// zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId, NumericsError> {
        let (l, cin) = dims2(self.shape(x));
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || stride == 0 {
            return Err(self.err("conv1d", format!("input [{l}, {cin}], weight {ws:?}, stride {stride}")));
        }
        let k = ws[0];
        if l + 2 * pad < k {
            return Err(self.err("conv1d", format!("length {l} too short for kernel {k}")));
        }
        let lout = (l + 2 * pad - k) / stride + 1;
        Ok(self.push(Op::Conv1d { x, w, stride, pad }, vec![lout, ws[2]]))
    }

    /// Row-wise normalization to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, a: NodeId, eps: T) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::LayerNorm(a, eps), s)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::SoftmaxRows(a), s)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(self.err("concat", "no parts".into()));
        }
        let dims: Vec<_> = parts.iter().map(|&p| dims2(self.shape(p))).collect();
        let shape = match axis {
            Axis::Cols => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(self.err("concat", format!("row counts differ: {dims:?}")));
                }
                vec![r, dims.iter().map(|d| d.1).sum()]
            }
            Axis::Rows => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(self.err("concat", format!("column counts differ: {dims:?}")));
                }
                vec![dims.iter().map(|d| d.0).sum(), c]
            }
        };
        Ok(self.push(Op::Concat(parts.to_vec(), axis), shape))
    }

    /// Columns `start..end` of the 2-D view.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, NumericsError> {
        let (r, c) = dims2(self.shape(a));
        if start >= end || end > c {
            return Err(self.err("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        Ok(self.push(Op::SliceCols(a, start, end), vec![r, end - start]))
    }

    /// `out[i] = a[index[i]]` over rows.
    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> Result<NodeId, NumericsError> {
        let (r, c) = dims2(self.shape(a));
        if index.is_empty() || index.iter().any(|&i| i >= r) {
            return Err(self.err("gather_rows", format!("index out of range for {r} rows")));
        }
        let n = index.len();
        Ok(self.push(Op::GatherRows(a, index), vec![n, c]))
    }

    /// Same buffer under a new shape.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let from = self.shape(a).to_vec();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != from.iter().product::<usize>() {
            return Err(self.err("reshape", format!("{from:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![1])
    }

    /// Sum over columns, one value per row: `[m, 1]`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (r, _) = dims2(self.shape(a));
        self.push(Op::RowSum(a), vec![r, 1])
    }

    /// Cosine of the angle between corresponding rows: `[m, 1]`.
    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(self.err("row_cosine", format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::RowCosine(a, b), vec![dims2(&sa).0, 1]))
    }

    /// Evaluates every node with the given parameter and input bindings.
    pub fn forward_eval(&self, params: &TensorMap<T>, inputs: &TensorMap<T>) -> Result<Evaluation<T>, NumericsError> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let (kind, table) = match node.op {
                        Op::Input(_) => ("input", inputs),
                        _ => ("param", params),
                    };
                    let t = table.get(name).ok_or_else(|| NumericsError::Unbound {
                        kind,
                        name: name.clone(),
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(NumericsError::Shape {
                            node: format!("#{i} {kind} `{name}`"),
                            detail: format!("bound {:?}, declared {:?}", t.shape(), node.shape),
                        });
                    }
                    t.clone()
                }
                op => eval_op(op, &node.shape, &values),
            };
            values.push(v);
        }
        Ok(Evaluation { values })
    }

    pub(crate) fn leaf_id(&self, name: &str, param: bool) -> Option<NodeId> {
        if param {
            self.params.get(name).copied()
        } else {
            self.inputs.get(name).copied()
        }
    }

    /// Nodes whose value depends on `leaf`, in evaluation order.
    pub(crate) fn downstream(&self, leaf: NodeId) -> Vec<usize> {
        let mut dirty = vec![false; self.nodes.len()];
        dirty[leaf.0] = true;
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().skip(leaf.0 + 1) {
            if node.op.any_operand(|a| dirty[a.0]) {
                dirty[i] = true;
                out.push(i);
            }
        }
        out
    }

    /// Value of `output` when `leaf` takes `value` and everything else is
    /// as in `base`. Only `dirty` nodes (from [`Self::downstream`]) with a
    /// changed operand are recomputed.
    pub(crate) fn reevaluate(
        &self,
        base: &Evaluation<T>,
        leaf: NodeId,
        value: &Tensor<T>,
        dirty: &[usize],
        output: NodeId,
    ) -> T {
        struct Overlay<'a, T> {
            base: &'a [Tensor<T>],
            over: Vec<Option<Tensor<T>>>,
        }
        impl<T> std::ops::Index<usize> for Overlay<'_, T> {
            type Output = Tensor<T>;
            fn index(&self, i: usize) -> &Tensor<T> {
                self.over[i].as_ref().unwrap_or(&self.base[i])
            }
        }
        let mut v = Overlay {
            base: &base.values,
            over: vec![None; self.nodes.len()],
        };
        v.over[leaf.0] = Some(value.clone());
        for &i in dirty {
            let node = &self.nodes[i];
            if !node.op.any_operand(|a| v.over[a.0].is_some()) {
                continue;
            }
            let t = eval_op(&node.op, &node.shape, &v);
            // unchanged values keep their consumers clean
            let same = t
                .data()
                .iter()
                .zip(base.values[i].data())
                .all(|(x, y)| x == y && x.is_sign_negative() == y.is_sign_negative());
            if !same {
                v.over[i] = Some(t);
            }
        }
        v[output.0].data()[0]
    }

    /// Gradients of the scalar node `output` with respect to every leaf.
    pub fn backward(&self, eval: &Evaluation<T>, output: NodeId) -> Result<Gradients<T>, NumericsError> {
        if self.nodes[output.0].shape.iter().product::<usize>() != 1 {
            return Err(NumericsError::NonScalarOutput {
                node: format!("#{} {}", output.0, self.nodes[output.0].op.name()),
                shape: self.nodes[output.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(&self.nodes[output.0].shape));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input(_) | Op::Param(_) | Op::Const(_) => {
                    grads[i] = Some(g);
                }
                op => backprop_op(op, &g, &eval.values, &self.nodes, i, &mut grads),
            }
        }
        let mut out = Gradients::default();
        for (name, &id) in &self.params {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].shape));
            out.params.insert(name.clone(), g);
        }
        for (name, &id) in &self.inputs {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].shape));
            out.inputs.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// Taylor branch below this squared angle; five terms are exact to f64
// rounding there.
fn small_angle<T: Scalar>() -> T {
    T::lit(1e-2)
}

pub(crate) fn sin_ratio<T: Scalar>(a: T) -> T {
    if a < small_angle() {
        T::one() - a / T::lit(6.0) + a * a / T::lit(120.0) - a * a * a / T::lit(5040.0)
            + a * a * a * a / T::lit(362880.0)
    } else {
        let t = a.sqrt();
        t.sin() / t
    }
}

pub(crate) fn cos_ratio<T: Scalar>(a: T) -> T {
    if a < small_angle() {
        T::lit(0.5) - a / T::lit(24.0) + a * a / T::lit(720.0) - a * a * a / T::lit(40320.0)
            + a * a * a * a / T::lit(3628800.0)
    } else {
        (T::one() - a.sqrt().cos()) / a
    }
}

fn sin_ratio_grad<T: Scalar>(a: T) -> T {
    if a < small_angle() {
        -T::one() / T::lit(6.0) + a / T::lit(60.0) - a * a / T::lit(1680.0) + a * a * a / T::lit(90720.0)
    } else {
        (a.sqrt().cos() - sin_ratio(a)) / (T::lit(2.0) * a)
    }
}

fn cos_ratio_grad<T: Scalar>(a: T) -> T {
    if a < small_angle() {
        -T::one() / T::lit(24.0) + a / T::lit(360.0) - a * a / T::lit(13440.0) + a * a * a / T::lit(907200.0)
    } else {
        (sin_ratio(a) / T::lit(2.0) - cos_ratio(a)) / a
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let inner = k * (x + c * x * x * x);
    let th = inner.tanh();
    let half = T::lit(0.5);
    let y = half * x * (T::one() + th);
    let dinner = k * (T::one() + T::lit(3.0) * c * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

fn apply_unary<T: Scalar>(f: UnaryFn, x: T) -> T {
    match f {
        UnaryFn::Sigmoid => sigmoid(x),
        UnaryFn::Silu => x * sigmoid(x),
        UnaryFn::Gelu => gelu_parts(x).0,
        UnaryFn::Tanh => x.tanh(),
        UnaryFn::Exp => x.exp(),
        UnaryFn::Ln => x.ln(),
        UnaryFn::SinRatio => sin_ratio(x),
        UnaryFn::CosRatio => cos_ratio(x),
    }
}

fn unary_grad<T: Scalar>(f: UnaryFn, x: T, y: T) -> T {
    match f {
        UnaryFn::Sigmoid => y * (T::one() - y),
        UnaryFn::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        UnaryFn::Gelu => gelu_parts(x).1,
        UnaryFn::Tanh => T::one() - y * y,
        UnaryFn::Exp => y,
        UnaryFn::Ln => T::one() / x,
        UnaryFn::SinRatio => sin_ratio_grad(x),
        UnaryFn::CosRatio => cos_ratio_grad(x),
    }
}

fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out_shape: &[usize], f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape.to_vec(), data).expect("shape inferred");
    }
    let (r, c) = dims2(out_shape);
    let (ra, ca) = (a.rows(), a.cols());
    let (rb, cb) = (b.rows(), b.cols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ra == 1 { 0 } else { i };
        let ib = if rb == 1 { 0 } else { i };
        for j in 0..c {
            let x = a.data()[ia * ca + if ca == 1 { 0 } else { j }];
            let y = b.data()[ib * cb + if cb == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Tensor::new(out_shape.to_vec(), data).expect("shape inferred")
}

/// Sums a full-size gradient down to a (possibly broadcast) operand shape.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let (r, c) = (g.rows(), g.cols());
    let (tr, tc) = dims2(shape);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            od[oi * tc + oj] += g.data()[i * c + j];
        }
    }
    out
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn eval_op<T: Scalar, V>(op: &Op<T>, shape: &[usize], v: &V) -> Tensor<T>
where
    V: std::ops::Index<usize, Output = Tensor<T>> + ?Sized,
{
    match op {
        Op::Input(_) | Op::Param(_) => unreachable!("leaves bound by caller"),
        Op::Const(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (&v[a.0], &v[b.0]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![T::zero(); m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(shape.to_vec(), out).expect("shape inferred")
        }
        Op::MatMulT(a, b) => {
            let (a, b) = (&v[a.0], &v[b.0]);
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let ar = a.row(i);
                for j in 0..n {
                    let br = b.row(j);
                    let mut s = T::zero();
                    for p in 0..k {
                        s += ar[p] * br[p];
                    }
                    out.push(s);
                }
            }
            Tensor::new(shape.to_vec(), out).expect("shape inferred")
        }
        Op::Transpose(a) => v[a.0].transpose(),
        Op::Add(a, b) => broadcast_binary(&v[a.0], &v[b.0], shape, |x, y| x + y),
        Op::Sub(a, b) => broadcast_binary(&v[a.0], &v[b.0], shape, |x, y| x - y),
        Op::Mul(a, b) => broadcast_binary(&v[a.0], &v[b.0], shape, |x, y| x * y),
        Op::Div(a, b) => broadcast_binary(&v[a.0], &v[b.0], shape, |x, y| x / y),
        Op::Scale(a, c) => v[a.0].scaled(*c),
        Op::Shift(a, c) => v[a.0].map(|x| x + *c),
        Op::Unary(a, f) => v[a.0].map(|x| apply_unary(*f, x)),
        Op::Cross(a, b) => {
            let (a, b) = (&v[a.0], &v[b.0]);
            let mut out = Vec::with_capacity(a.len());
            for (p, q) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)) {
                out.extend_from_slice(&cross3(p, q));
            }
            Tensor::new(shape.to_vec(), out).expect("shape inferred")
        }
        Op::Conv1d { x, w, stride, pad } => {
            let (x, w) = (&v[x.0], &v[w.0]);
            conv1d_forward(x, w, *stride, *pad, shape)
        }
        Op::LayerNorm(a, eps) => {
            let x = &v[a.0];
            let c = x.cols();
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = out.row_mut(r);
                let (mu, inv) = row_stats(row, *eps);
                for e in row.iter_mut() {
                    *e = (*e - mu) * inv;
                }
                debug_assert_eq!(row.len(), c);
            }
            out
        }
        Op::SoftmaxRows(a) => {
            let mut out = v[a.0].clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut s = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    s += *e;
                }
                for e in row.iter_mut() {
                    *e /= s;
                }
            }
            out
        }
        Op::Concat(parts, axis) => {
            let (r, c) = dims2(shape);
            let mut out = Vec::with_capacity(r * c);
            match axis {
                Axis::Rows => {
                    for p in parts {
                        out.extend_from_slice(v[p.0].data());
                    }
                }
                Axis::Cols => {
                    for i in 0..r {
                        for p in parts {
                            out.extend_from_slice(v[p.0].row(i));
                        }
                    }
                }
            }
            Tensor::new(shape.to_vec(), out).expect("shape inferred")
        }
        Op::SliceCols(a, s, e) => {
            let x = &v[a.0];
            let mut out = Vec::with_capacity(x.rows() * (e - s));
            for i in 0..x.rows() {
                out.extend_from_slice(&x.row(i)[*s..*e]);
            }
            Tensor::new(shape.to_vec(), out).expect("shape inferred")
        }
        Op::GatherRows(a, index) => {
            let x = &v[a.0];
            let mut out = Vec::with_capacity(index.len() * x.cols());
            for &i in index {
                out.extend_from_slice(x.row(i));
            }
            Tensor::new(shape.to_vec(), out).expect("shape inferred")
        }
        Op::Reshape(a) => v[a.0].clone().reshape(shape).expect("shape inferred"),
        Op::Sum(a) => Tensor::scalar(v[a.0].sum()),
        Op::Mean(a) => Tensor::scalar(v[a.0].mean()),
        Op::RowSum(a) => {
            let x = &v[a.0];
            let out = (0..x.rows()).map(|i| x.row(i).iter().copied().sum()).collect();
            Tensor::new(shape.to_vec(), out).expect("shape inferred")
        }
        Op::RowCosine(a, b) => {
            let (a, b) = (&v[a.0], &v[b.0]);
            let out = (0..a.rows())
                .map(|i| {
                    let (p, q) = (a.row(i), b.row(i));
                    let (dot, na, nb) = dot_norms(p, q);
                    dot / (na * nb)
                })
                .collect();
            Tensor::new(shape.to_vec(), out).expect("shape inferred")
        }
    }
}

fn cross3<T: Scalar>(p: &[T], q: &[T]) -> [T; 3] {
    [
        p[1] * q[2] - p[2] * q[1],
        p[2] * q[0] - p[0] * q[2],
        p[0] * q[1] - p[1] * q[0],
    ]
}

fn dot_norms<T: Scalar>(p: &[T], q: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut pp = T::zero();
    let mut qq = T::zero();
    for (&x, &y) in p.iter().zip(q) {
        dot += x * y;
        pp += x * x;
        qq += y * y;
    }
    (dot, pp.sqrt(), qq.sqrt())
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize_lossy(row.len());
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
    (mu, T::one() / (var + eps).sqrt())
}

fn conv1d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize, shape: &[usize]) -> Tensor<T> {
    let (l, cin) = (x.rows(), x.cols());
    let (k, cout) = (w.shape()[0], w.shape()[2]);
    let lout = shape[0];
    let mut out = vec![T::zero(); lout * cout];
    let wd = w.data();
    for o in 0..lout {
        let orow = &mut out[o * cout..(o + 1) * cout];
        for kk in 0..k {
            let pos = (o * stride + kk) as isize - pad as isize;
            if pos < 0 || pos as usize >= l {
                continue;
            }
            let xr = x.row(pos as usize);
            for (ci, &xv) in xr.iter().enumerate().take(cin) {
                let wrow = &wd[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape inferred")
}

fn backprop_op<T: Scalar>(
    op: &Op<T>,
    g: &Tensor<T>,
    v: &[Tensor<T>],
    nodes: &[Node<T>],
    this: usize,
    grads: &mut [Option<Tensor<T>>],
) {
    let shape_of = |id: &NodeId| nodes[id.0].shape.as_slice();
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&v[a.0], &v[b.0]);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            // dA = G B^T
            let mut ga = vec![T::zero(); m * k];
            for i in 0..m {
                let grow = &g.data()[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = bv.row(p);
                    let mut s = T::zero();
                    for j in 0..n {
                        s += grow[j] * brow[j];
                    }
                    ga[i * k + p] = s;
                }
            }
            // dB = A^T G
            let mut gb = vec![T::zero(); k * n];
            for i in 0..m {
                let grow = &g.data()[i * n..(i + 1) * n];
                let arow = av.row(i);
                for p in 0..k {
                    let a_ip = arow[p];
                    if a_ip == T::zero() {
                        continue;
                    }
                    let gbrow = &mut gb[p * n..(p + 1) * n];
                    for (o, &gv) in gbrow.iter_mut().zip(grow) {
                        *o += a_ip * gv;
                    }
                }
            }
            accumulate(grads, *a, Tensor::new(shape_of(a).to_vec(), ga).unwrap());
            accumulate(grads, *b, Tensor::new(shape_of(b).to_vec(), gb).unwrap());
        }
        Op::MatMulT(a, b) => {
            let (av, bv) = (&v[a.0], &v[b.0]);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            // C = A B^T; dA = G B, dB = G^T A
            let mut ga = vec![T::zero(); m * k];
            matmul_into(g.data(), bv.data(), &mut ga, m, n, k);
            let gt = g.transpose();
            let mut gb = vec![T::zero(); n * k];
            matmul_into(gt.data(), av.data(), &mut gb, n, m, k);
            accumulate(grads, *a, Tensor::new(shape_of(a).to_vec(), ga).unwrap());
            accumulate(grads, *b, Tensor::new(shape_of(b).to_vec(), gb).unwrap());
        }
        Op::Transpose(a) => {
            let t = g.transpose().reshape(shape_of(a)).unwrap();
            accumulate(grads, *a, t);
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, reduce_to(g, shape_of(a)));
            accumulate(grads, *b, reduce_to(g, shape_of(b)));
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, reduce_to(g, shape_of(a)));
            accumulate(grads, *b, reduce_to(&g.scaled(-T::one()), shape_of(b)));
        }
        Op::Mul(a, b) => {
            let out_shape = &nodes[this].shape;
            let ga = broadcast_binary(g, &v[b.0], out_shape, |x, y| x * y);
            let gb = broadcast_binary(g, &v[a.0], out_shape, |x, y| x * y);
            accumulate(grads, *a, reduce_to(&ga, shape_of(a)));
            accumulate(grads, *b, reduce_to(&gb, shape_of(b)));
        }
        Op::Div(a, b) => {
            let out_shape = &nodes[this].shape;
            let ga = broadcast_binary(g, &v[b.0], out_shape, |x, y| x / y);
            // d(a/b)/db = -(a/b)/b = -out/b
            let q = broadcast_binary(&v[this], &v[b.0], out_shape, |o, y| -o / y);
            let gb = q.zip_map(g, |x, y| x * y);
            accumulate(grads, *a, reduce_to(&ga, shape_of(a)));
            accumulate(grads, *b, reduce_to(&gb, shape_of(b)));
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.scaled(*c)),
        Op::Shift(a, _) => accumulate(grads, *a, g.clone()),
        Op::Unary(a, f) => {
            let (x, y) = (&v[a.0], &v[this]);
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * unary_grad(*f, xi, yi))
                .collect();
            accumulate(grads, *a, Tensor::new(shape_of(a).to_vec(), data).unwrap());
        }
        Op::Cross(a, b) => {
            let (av, bv) = (&v[a.0], &v[b.0]);
            let mut ga = Vec::with_capacity(av.len());
            let mut gb = Vec::with_capacity(bv.len());
            for ((p, q), gg) in av
                .data()
                .chunks_exact(3)
                .zip(bv.data().chunks_exact(3))
                .zip(g.data().chunks_exact(3))
            {
                ga.extend_from_slice(&cross3(q, gg));
                gb.extend_from_slice(&cross3(gg, p));
            }
            accumulate(grads, *a, Tensor::new(shape_of(a).to_vec(), ga).unwrap());
            accumulate(grads, *b, Tensor::new(shape_of(b).to_vec(), gb).unwrap());
        }
        Op::Conv1d { x, w, stride, pad } => {
            let (xv, wv) = (&v[x.0], &v[w.0]);
            let (l, cin) = (xv.rows(), xv.cols());
            let (k, cout) = (wv.shape()[0], wv.shape()[2]);
            let lout = g.rows();
            let mut gx = vec![T::zero(); l * cin];
            let mut gw = vec![T::zero(); k * cin * cout];
            let wd = wv.data();
            for o in 0..lout {
                let grow = g.row(o);
                for kk in 0..k {
                    let pos = (o * stride + kk) as isize - *pad as isize;
                    if pos < 0 || pos as usize >= l {
                        continue;
                    }
                    let pos = pos as usize;
                    let xr = xv.row(pos);
                    for ci in 0..cin {
                        let base = (kk * cin + ci) * cout;
                        let wrow = &wd[base..base + cout];
                        let mut s = T::zero();
                        for (&wv, &gv) in wrow.iter().zip(grow) {
                            s += wv * gv;
                        }
                        gx[pos * cin + ci] += s;
                        let xv = xr[ci];
                        if xv != T::zero() {
                            for (gwv, &gv) in gw[base..base + cout].iter_mut().zip(grow) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
            }
            accumulate(grads, *x, Tensor::new(shape_of(x).to_vec(), gx).unwrap());
            accumulate(grads, *w, Tensor::new(shape_of(w).to_vec(), gw).unwrap());
        }
        Op::LayerNorm(a, eps) => {
            let x = &v[a.0];
            let y = &v[this];
            let c = x.cols();
            let n = T::from_usize_lossy(c);
            let mut gx = vec![T::zero(); x.len()];
            for r in 0..x.rows() {
                let (_, inv) = row_stats(x.row(r), *eps);
                let (yr, gr) = (y.row(r), g.row(r));
                let gmean = gr.iter().copied().sum::<T>() / n;
                let gymean = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                for j in 0..c {
                    gx[r * c + j] = inv * (gr[j] - gmean - yr[j] * gymean);
                }
            }
            accumulate(grads, *a, Tensor::new(shape_of(a).to_vec(), gx).unwrap());
        }
        Op::SoftmaxRows(a) => {
            let y = &v[this];
            let c = y.cols();
            let mut gx = vec![T::zero(); y.len()];
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                for j in 0..c {
                    gx[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, *a, Tensor::new(shape_of(a).to_vec(), gx).unwrap());
        }
        Op::Concat(parts, axis) => match axis {
            Axis::Rows => {
                let mut offset = 0;
                for p in parts {
                    let n = v[p.0].len();
                    let t = Tensor::new(shape_of(p).to_vec(), g.data()[offset..offset + n].to_vec()).unwrap();
                    offset += n;
                    accumulate(grads, *p, t);
                }
            }
            Axis::Cols => {
                let mut col = 0;
                for p in parts {
                    let (r, c) = (v[p.0].rows(), v[p.0].cols());
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        data.extend_from_slice(&g.row(i)[col..col + c]);
                    }
                    col += c;
                    accumulate(grads, *p, Tensor::new(shape_of(p).to_vec(), data).unwrap());
                }
            }
        },
        Op::SliceCols(a, s, _) => {
            let x = &v[a.0];
            let mut gx = Tensor::zeros(shape_of(a));
            let w = g.cols();
            for i in 0..x.rows() {
                gx.row_mut(i)[*s..*s + w].copy_from_slice(g.row(i));
            }
            accumulate(grads, *a, gx);
        }
        Op::GatherRows(a, index) => {
            let mut gx = Tensor::zeros(shape_of(a));
            for (i, &src) in index.iter().enumerate() {
                for (o, &gv) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                    *o += gv;
                }
            }
            accumulate(grads, *a, gx);
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, g.clone().reshape(shape_of(a)).unwrap());
        }
        Op::Sum(a) => {
            accumulate(grads, *a, Tensor::full(shape_of(a), g.data()[0]));
        }
        Op::Mean(a) => {
            let n = T::from_usize_lossy(v[a.0].len());
            accumulate(grads, *a, Tensor::full(shape_of(a), g.data()[0] / n));
        }
        Op::RowSum(a) => {
            let x = &v[a.0];
            let c = x.cols();
            let data = (0..x.rows())
                .flat_map(|i| std::iter::repeat_n(g.data()[i], c))
                .collect();
            accumulate(grads, *a, Tensor::new(shape_of(a).to_vec(), data).unwrap());
        }
        Op::RowCosine(a, b) => {
            let (av, bv) = (&v[a.0], &v[b.0]);
            let c = av.cols();
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            for i in 0..av.rows() {
                let (p, q) = (av.row(i), bv.row(i));
                let (dot, na, nb) = dot_norms(p, q);
                let cos = dot / (na * nb);
                let gi = g.data()[i];
                for j in 0..c {
                    ga[i * c + j] = gi * (q[j] / (na * nb) - cos * p[j] / (na * na));
                    gb[i * c + j] = gi * (p[j] / (na * nb) - cos * q[j] / (nb * nb));
                }
            }
            accumulate(grads, *a, Tensor::new(shape_of(a).to_vec(), ga).unwrap());
            accumulate(grads, *b, Tensor::new(shape_of(b).to_vec(), gb).unwrap());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(pairs: &[(&str, Tensor<f64>)]) -> TensorMap<f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn reevaluate_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3, 4]).unwrap();
        let w = g.param("w", &[4, 5]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.unary(h, UnaryFn::Tanh);
        let left = g.slice_cols(h, 0, 2).unwrap();
        let right = g.slice_cols(h, 2, 5).unwrap();
        let a = g.sum(left);
        let b = g.sum(right);
        let sq = g.mul(b, b).unwrap();
        let out = g.add(a, sq).unwrap();
        let params = bind(&[("w", Tensor::randn(&[4, 5], 1.0, &mut rng))]);
        let inputs = bind(&[("x", Tensor::randn(&[3, 4], 1.0, &mut rng))]);
        let base = g.forward_eval(&params, &inputs).unwrap();
        let id = g.leaf_id("w", true).unwrap();
        let dirty = g.downstream(id);
        for i in 0..20 {
            let mut p = params.clone();
            p.get_mut("w").unwrap().data_mut()[i] += 1e-3;
            let full = g.forward_eval(&p, &inputs).unwrap().scalar(out);
            let inc = g.reevaluate(&base, id, &p["w"], &dirty, out);
            assert_eq!(full.to_bits(), inc.to_bits());
        }
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3]).unwrap();
        let inputs = bind(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        let e = g.forward_eval(&TensorMap::new(), &inputs).unwrap();
        assert_eq!(e.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3, 1]).unwrap();
        let i3 = g.constant(Tensor::identity(3));
        let y = g.matmul(i3, x).unwrap();
        let inputs = bind(&[("x", Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap())]);
        let e = g.forward_eval(&TensorMap::new(), &inputs).unwrap();
        assert_eq!(e.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn square_value_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[1]).unwrap();
        let y = g.square(x);
        let params = bind(&[("x", Tensor::scalar(3.0))]);
        let e = g.forward_eval(&params, &TensorMap::new()).unwrap();
        assert_eq!(e.scalar(y), 9.0);
        let grads = g.backward(&e, y).unwrap();
        assert_eq!(grads.params["x"].data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[5]).unwrap();
        let y = g.sum(x);
        let params = bind(&[("x", Tensor::vector(vec![0.3, -1.0, 2.0, 4.0, 5.5]))]);
        let e = g.forward_eval(&params, &TensorMap::new()).unwrap();
        let grads = g.backward(&e, y).unwrap();
        assert_eq!(grads.params["x"].data(), &[1.0; 5]);
    }

    #[test]
    fn softmax_cross_entropy_at_uniform_logits_has_zero_mean_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.param("z", &[1, 4]).unwrap();
        let p = g.softmax_rows(z);
        let onehot = g.constant(Tensor::matrix(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let logp = g.unary(p, UnaryFn::Ln);
        let picked = g.mul(logp, onehot).unwrap();
        let total = g.sum(picked);
        let loss = g.scale(total, -1.0);
        let params = bind(&[("z", Tensor::full(&[1, 4], 0.7))]);
        let e = g.forward_eval(&params, &TensorMap::new()).unwrap();
        let gz = g.backward(&e, loss).unwrap().params["z"].clone();
        assert!(gz.sum().abs() < 1e-15);
        assert!(gz.data()[2] < 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[2]).unwrap();
        let e = g
            .forward_eval(&bind(&[("x", Tensor::vector(vec![1.0, 2.0]))]), &TensorMap::new())
            .unwrap();
        assert!(matches!(g.backward(&e, x), Err(NumericsError::NonScalarOutput { .. })));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");

        let inputs = bind(&[("a", Tensor::zeros(&[3, 3])), ("b", Tensor::zeros(&[2, 3]))]);
        let err = g.forward_eval(&TensorMap::new(), &inputs).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }

    #[test]
    fn evaluation_is_bit_identical_across_calls() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[4, 3]).unwrap();
        let w = g.param("w", &[3, 3]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.layer_norm(h, 1e-5);
        let h = g.softmax_rows(h);
        let y = g.mean(h);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = bind(&[("x", Tensor::randn(&[4, 3], 1.0, &mut rng))]);
        let params = bind(&[("w", Tensor::randn(&[3, 3], 1.0, &mut rng))]);
        let a = g.forward_eval(&params, &inputs).unwrap();
        let b = g.forward_eval(&params, &inputs).unwrap();
        assert_eq!(a.scalar(y).to_bits(), b.scalar(y).to_bits());
    }

    #[test]
    fn rotation_ratios_are_continuous_at_the_branch() {
        let lo: f64 = 1e-2 * (1.0 - 1e-12);
        let hi: f64 = 1e-2 * (1.0 + 1e-12);
        assert!((sin_ratio(lo) - sin_ratio(hi)).abs() < 1e-14);
        assert!((cos_ratio(lo) - cos_ratio(hi)).abs() < 1e-14);
        assert!((sin_ratio_grad(lo) - sin_ratio_grad(hi)).abs() < 1e-12);
        assert!((cos_ratio_grad(lo) - cos_ratio_grad(hi)).abs() < 1e-12);
    }
}
