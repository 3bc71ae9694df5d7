//! Build-once, evaluate-many computation graph with reverse-mode autodiff.
//!
//! A [`GraphBuilder`] appends primitive nodes in topological order; shapes
//! are propagated and checked eagerly so mismatches fail at construction
//! with the offending node named. [`Graph::forward`] binds named inputs and
//! caches every intermediate in an [`Evaluation`], from which
//! [`Evaluation::backward`] seeds a scalar output and accumulates gradients
//! for all named inputs.

use super::{Array, GradError};
use std::collections::BTreeMap;

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Input { name: String },
    Constant(Array),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Sum(NodeId),
    Gather { src: NodeId, indices: Vec<usize> },
    SelectRows { src: NodeId, indices: Vec<usize> },
    SliceCols { src: NodeId, start: usize, len: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Incrementally constructs a [`Graph`]. Node ids are indices in
/// construction order, which is also the topological order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn name_of(&self, id: NodeId) -> String {
        match &self.nodes[id].op {
            Op::Input { name } => format!("input '{name}'"),
            op => format!("{}#{}", op.kind(), id),
        }
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape_of(id);
        if s.len() == 2 {
            (s[0], s[1])
        } else {
            (1, s.first().copied().unwrap_or(0))
        }
    }

    fn mismatch(&self, pending: &Op, detail: String) -> GradError {
        GradError::ShapeMismatch {
            node: format!("{}#{}", pending.kind(), self.nodes.len()),
            detail,
        }
    }

    fn same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.mismatch(
                &op,
                format!(
                    "{} has shape {:?} but {} has shape {:?}",
                    self.name_of(a),
                    self.shape_of(a),
                    self.name_of(b),
                    self.shape_of(b)
                ),
            ));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(op, shape))
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape(Op::Add(a, b), a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape(Op::Sub(a, b), a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape(Op::Mul(a, b), a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape(Op::Div(a, b), a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ac != br {
            let op = Op::MatMul(a, b);
            return Err(self.mismatch(
                &op,
                format!(
                    "inner dimensions differ: {} is {}x{}, {} is {}x{}",
                    self.name_of(a),
                    ar,
                    ac,
                    self.name_of(b),
                    br,
                    bc
                ),
            ));
        }
        Ok(self.push(Op::MatMul(a, b), vec![ar, bc]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        self.push(Op::Transpose(a), vec![c, r])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Scale(a, c), shape)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::AddScalar(a, c), shape)
    }

    /// Broadcast-add a length-d vector to every row of an [n x d] array.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, GradError> {
        let (_, ac) = self.dims(a);
        let (vr, vc) = self.dims(v);
        if vr != 1 || vc != ac {
            let op = Op::AddRow(a, v);
            return Err(self.mismatch(
                &op,
                format!(
                    "cannot broadcast {} of shape {:?} over rows of {} with {} columns",
                    self.name_of(v),
                    self.shape_of(v),
                    self.name_of(a),
                    ac
                ),
            ));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::AddRow(a, v), shape))
    }

    /// Broadcast-multiply a length-d vector into every row of an [n x d] array.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, GradError> {
        let (_, ac) = self.dims(a);
        let (vr, vc) = self.dims(v);
        if vr != 1 || vc != ac {
            let op = Op::MulRow(a, v);
            return Err(self.mismatch(
                &op,
                format!(
                    "cannot broadcast {} of shape {:?} over rows of {} with {} columns",
                    self.name_of(v),
                    self.shape_of(v),
                    self.name_of(a),
                    ac
                ),
            ));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::MulRow(a, v), shape))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Relu(a), shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Sigmoid(a), shape)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Softmax(a), shape)
    }

    /// Row-wise normalization to zero mean, unit variance (no learned
    /// gain/bias; compose with [`Self::mul_row`] and [`Self::add_row`]).
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::LayerNorm(a), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Abs(a), shape)
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    /// Per-row element pick: out[i] = src[i, indices[i]], shape [n x 1].
    pub fn gather(&mut self, src: NodeId, indices: Vec<usize>) -> Result<NodeId, GradError> {
        let (r, c) = self.dims(src);
        if indices.len() != r || indices.iter().any(|&i| i >= c) {
            let op = Op::Gather {
                src,
                indices: indices.clone(),
            };
            return Err(self.mismatch(
                &op,
                format!(
                    "{} indices for {} rows of {} columns",
                    indices.len(),
                    r,
                    c
                ),
            ));
        }
        Ok(self.push(Op::Gather { src, indices }, vec![r, 1]))
    }

    /// Row subset/permutation: out row j = src row indices[j].
    pub fn select_rows(&mut self, src: NodeId, indices: Vec<usize>) -> Result<NodeId, GradError> {
        let (r, c) = self.dims(src);
        if indices.iter().any(|&i| i >= r) {
            let op = Op::SelectRows {
                src,
                indices: indices.clone(),
            };
            return Err(self.mismatch(&op, format!("row index out of range for {r} rows")));
        }
        let n = indices.len();
        Ok(self.push(Op::SelectRows { src, indices }, vec![n, c]))
    }

    pub fn slice_cols(
        &mut self,
        src: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, GradError> {
        let (r, c) = self.dims(src);
        if start + len > c {
            let op = Op::SliceCols { src, start, len };
            return Err(self.mismatch(
                &op,
                format!("columns {start}..{} out of range for {c}", start + len),
            ));
        }
        Ok(self.push(Op::SliceCols { src, start, len }, vec![r, len]))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId, GradError> {
        let cols = self.dims(parts[0]).1;
        let mut rows = 0;
        for &p in &parts {
            let (pr, pc) = self.dims(p);
            if pc != cols {
                let op = Op::ConcatRows(parts.clone());
                return Err(self.mismatch(
                    &op,
                    format!("{} has {} columns, expected {}", self.name_of(p), pc, cols),
                ));
            }
            rows += pr;
        }
        Ok(self.push(Op::ConcatRows(parts), vec![rows, cols]))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId, GradError> {
        let rows = self.dims(parts[0]).0;
        let mut cols = 0;
        for &p in &parts {
            let (pr, pc) = self.dims(p);
            if pr != rows {
                let op = Op::ConcatCols(parts.clone());
                return Err(self.mismatch(
                    &op,
                    format!("{} has {} rows, expected {}", self.name_of(p), pr, rows),
                ));
            }
            cols += pc;
        }
        Ok(self.push(Op::ConcatCols(parts), vec![rows, cols]))
    }

    pub fn output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        self.shape_of(id)
    }

    pub fn finish(self) -> Graph {
        Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }
}

/// Immutable computation graph. Safe to share across threads; each
/// evaluation owns its own value cache.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Named input arrays for one evaluation, borrowed from the caller.
#[derive(Debug, Default)]
pub struct Bindings<'a> {
    map: BTreeMap<&'a str, &'a Array>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &'a str, value: &'a Array) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn bind_all<I: IntoIterator<Item = (&'a String, &'a Array)>>(&mut self, it: I) -> &mut Self {
        for (k, v) in it {
            self.map.insert(k.as_str(), v);
        }
        self
    }

    fn get(&self, name: &str) -> Option<&'a Array> {
        self.map.get(name).copied()
    }
}

impl Graph {
    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(String::as_str)
    }

    fn node_name(&self, id: NodeId) -> String {
        match &self.nodes[id].op {
            Op::Input { name } => format!("input '{name}'"),
            op => format!("{}#{}", op.kind(), id),
        }
    }

    /// Evaluate every node in topological order, caching intermediates.
    ///
    /// Deterministic: identical bindings produce bit-identical values. In
    /// debug builds a non-finite node value is reported as an error naming
    /// the node.
    pub fn forward<'g>(&'g self, bindings: &Bindings) -> Result<Evaluation<'g>, GradError> {
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let value = self.eval_node(id, node, &values, bindings)?;
            if cfg!(debug_assertions) && !value.all_finite() {
                return Err(GradError::NonFinite {
                    node: self.node_name(id),
                });
            }
            values.push(value);
        }
        Ok(Evaluation {
            graph: self,
            values,
        })
    }

    fn eval_node(
        &self,
        id: NodeId,
        node: &Node,
        values: &[Array],
        bindings: &Bindings,
    ) -> Result<Array, GradError> {
        let v = |i: NodeId| &values[i];
        Ok(match &node.op {
            Op::Input { name } => {
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| GradError::UnboundInput(name.clone()))?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(GradError::ShapeMismatch {
                        node: self.node_name(id),
                        detail: format!(
                            "bound shape {:?} does not match declared {:?}",
                            bound.shape(),
                            node.shape
                        ),
                    });
                }
                bound.clone()
            }
            Op::Constant(a) => a.clone(),
            Op::Add(a, b) => zip_map(v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => zip_map(v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(v(*a), v(*b), |x, y| x * y),
            Op::Div(a, b) => zip_map(v(*a), v(*b), |x, y| x / y),
            Op::MatMul(a, b) => matmul(v(*a), v(*b)),
            Op::Transpose(a) => transpose(v(*a)),
            Op::Scale(a, c) => map(v(*a), |x| x * c),
            Op::AddScalar(a, c) => map(v(*a), |x| x + c),
            Op::AddRow(a, row) => broadcast_row(v(*a), v(*row), |x, y| x + y),
            Op::MulRow(a, row) => broadcast_row(v(*a), v(*row), |x, y| x * y),
            Op::Relu(a) => map(v(*a), |x| x.max(0.0)),
            Op::Sigmoid(a) => map(v(*a), |x| 1.0 / (1.0 + (-x).exp())),
            Op::Softmax(a) => softmax(v(*a)),
            Op::LayerNorm(a) => layer_norm(v(*a)),
            Op::Log(a) => map(v(*a), |x| x.ln()),
            Op::Abs(a) => map(v(*a), |x| x.abs()),
            Op::Sum(a) => Array::scalar(v(*a).data().iter().sum()),
            Op::Gather { src, indices } => {
                let s = v(*src);
                let out: Vec<f64> = indices.iter().enumerate().map(|(i, &j)| s.at(i, j)).collect();
                Array::matrix(indices.len(), 1, out)
            }
            Op::SelectRows { src, indices } => {
                let s = v(*src);
                let c = s.cols();
                let mut out = Vec::with_capacity(indices.len() * c);
                for &i in indices {
                    out.extend_from_slice(s.row(i));
                }
                Array::matrix(indices.len(), c, out)
            }
            Op::SliceCols { src, start, len } => {
                let s = v(*src);
                let mut out = Vec::with_capacity(s.rows() * len);
                for r in 0..s.rows() {
                    let row = s.row(r);
                    out.extend_from_slice(&row[*start..start + len]);
                }
                Array::matrix(s.rows(), *len, out)
            }
            Op::ConcatRows(parts) => {
                let c = v(parts[0]).cols();
                let mut out = Vec::new();
                for &p in parts {
                    out.extend_from_slice(v(p).data());
                }
                let rows = out.len() / c;
                Array::matrix(rows, c, out)
            }
            Op::ConcatCols(parts) => {
                let rows = v(parts[0]).rows();
                let cols: usize = parts.iter().map(|&p| v(p).cols()).sum();
                let mut out = vec![0.0; rows * cols];
                let mut offset = 0;
                for &p in parts {
                    let a = v(p);
                    let pc = a.cols();
                    for r in 0..rows {
                        out[r * cols + offset..r * cols + offset + pc].copy_from_slice(a.row(r));
                    }
                    offset += pc;
                }
                Array::matrix(rows, cols, out)
            }
        })
    }
}

/// One forward pass over a graph, with all intermediate values cached so
/// gradients can be accumulated without recomputation.
#[derive(Debug)]
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Array>,
}

/// Gradients keyed by input name (parameters are inputs).
#[derive(Debug, Default)]
pub struct Gradients {
    by_input: BTreeMap<String, Array>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.by_input.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.by_input.iter()
    }

    pub fn insert(&mut self, name: String, grad: Array) {
        self.by_input.insert(name, grad);
    }
}

impl Evaluation<'_> {
    pub fn output(&self, name: &str) -> Result<&Array, GradError> {
        let id = self
            .graph
            .outputs
            .get(name)
            .ok_or_else(|| GradError::UnknownOutput(name.to_string()))?;
        Ok(&self.values[*id])
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.values[id]
    }

    /// Reverse sweep from a scalar output, returning gradients for every
    /// named input that the output depends on.
    pub fn backward(&self, seed_output: &str) -> Result<Gradients, GradError> {
        let &seed = self
            .graph
            .outputs
            .get(seed_output)
            .ok_or_else(|| GradError::UnknownOutput(seed_output.to_string()))?;
        if !self.values[seed].is_scalar() {
            return Err(GradError::NonScalarSeed(seed_output.to_string()));
        }

        let n = self.graph.nodes.len();
        let mut grads: Vec<Option<Array>> = vec![None; n];
        grads[seed] = Some(Array::scalar(1.0));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if matches!(self.graph.nodes[id].op, Op::Input { .. }) {
                grads[id] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (name, &id) in &self.graph.inputs {
            if let Some(g) = grads[id].take() {
                out.by_input.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, id: NodeId, g: &Array, grads: &mut [Option<Array>]) {
        let val = |i: NodeId| &self.values[i];
        let mut acc = |i: NodeId, contrib: Array| {
            match &mut grads[i] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            };
        };
        match &self.graph.nodes[id].op {
            Op::Input { .. } | Op::Constant(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(g, val(*b), |x, y| x * y));
                acc(*b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                acc(*a, zip_map(g, val(*b), |x, y| x / y));
                let num = zip_map(g, val(*a), |x, y| x * y);
                acc(
                    *b,
                    zip_map(&num, val(*b), |x, y| -x / (y * y)),
                );
            }
            Op::MatMul(a, b) => {
                let bt = transpose(val(*b));
                acc(*a, matmul(g, &bt));
                let at = transpose(val(*a));
                acc(*b, matmul(&at, g));
            }
            Op::Transpose(a) => acc(*a, transpose(g)),
            Op::Scale(a, c) => acc(*a, map(g, |x| x * c)),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, col_sums(g, self.values[*row].shape()));
            }
            Op::MulRow(a, row) => {
                acc(*a, broadcast_row(g, val(*row), |x, y| x * y));
                let prod = zip_map(g, val(*a), |x, y| x * y);
                acc(*row, col_sums(&prod, self.values[*row].shape()));
            }
            Op::Relu(a) => acc(*a, zip_map(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Sigmoid(a) => {
                let y = val(id);
                acc(*a, zip_map(g, y, |x, s| x * s * (1.0 - s)));
            }
            Op::Softmax(a) => acc(*a, softmax_backward(g, val(id))),
            Op::LayerNorm(a) => acc(*a, layer_norm_backward(g, val(*a))),
            Op::Log(a) => acc(*a, zip_map(g, val(*a), |x, y| x / y)),
            Op::Abs(a) => acc(
                *a,
                zip_map(g, val(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Sum(a) => {
                let s = g.scalar_value();
                let src = val(*a);
                acc(*a, Array::from_vec(src.shape().to_vec(), vec![s; src.len()]));
            }
            Op::Gather { src, indices } => {
                let s = val(*src);
                let mut d = Array::zeros(s.shape().to_vec());
                let c = s.cols();
                for (i, &j) in indices.iter().enumerate() {
                    d.data_mut()[i * c + j] += g.data()[i];
                }
                acc(*src, d);
            }
            Op::SelectRows { src, indices } => {
                let s = val(*src);
                let c = s.cols();
                let mut d = Array::zeros(s.shape().to_vec());
                for (j, &i) in indices.iter().enumerate() {
                    for k in 0..c {
                        d.data_mut()[i * c + k] += g.data()[j * c + k];
                    }
                }
                acc(*src, d);
            }
            Op::SliceCols { src, start, len } => {
                let s = val(*src);
                let c = s.cols();
                let mut d = Array::zeros(s.shape().to_vec());
                for r in 0..s.rows() {
                    for k in 0..*len {
                        d.data_mut()[r * c + start + k] += g.data()[r * len + k];
                    }
                }
                acc(*src, d);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut row = 0;
                for &p in parts {
                    let pr = val(p).rows();
                    let chunk = g.data()[row * c..(row + pr) * c].to_vec();
                    acc(p, Array::from_vec(val(p).shape().to_vec(), chunk));
                    row += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    let mut chunk = vec![0.0; rows * pc];
                    for r in 0..rows {
                        chunk[r * pc..(r + 1) * pc]
                            .copy_from_slice(&g.data()[r * cols + offset..r * cols + offset + pc]);
                    }
                    acc(p, Array::from_vec(val(p).shape().to_vec(), chunk));
                    offset += pc;
                }
            }
        }
    }
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::from_vec(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    debug_assert_eq!(a.len(), b.len());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::from_vec(a.shape().to_vec(), data)
}

fn broadcast_row(a: &Array, row: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let c = a.cols();
    let rv = row.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, rv[i % c]))
        .collect();
    Array::from_vec(a.shape().to_vec(), data)
}

fn col_sums(g: &Array, target_shape: &[usize]) -> Array {
    let c = g.cols();
    let mut sums = vec![0.0; c];
    for r in 0..g.rows() {
        for (s, v) in sums.iter_mut().zip(g.row(r)) {
            *s += v;
        }
    }
    Array::from_vec(target_shape.to_vec(), sums)
}

fn matmul(a: &Array, b: &Array) -> Array {
    let (n, k) = (a.rows(), a.cols());
    let m = b.cols();
    debug_assert_eq!(k, b.rows());
    let mut out = vec![0.0; n * m];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array::matrix(n, m, out)
}

fn transpose(a: &Array) -> Array {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Array::matrix(c, r, out)
}

fn softmax(a: &Array) -> Array {
    let c = a.cols();
    let mut out = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let row = a.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    let _ = c;
    Array::from_vec(a.shape().to_vec(), out)
}

fn softmax_backward(g: &Array, y: &Array) -> Array {
    let c = y.cols();
    let mut out = Vec::with_capacity(y.len());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = &g.data()[r * c..(r + 1) * c];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
    }
    Array::from_vec(y.shape().to_vec(), out)
}

fn layer_norm(a: &Array) -> Array {
    let c = a.cols();
    let mut out = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let row = a.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        out.extend(row.iter().map(|&x| (x - mean) * inv));
    }
    Array::from_vec(a.shape().to_vec(), out)
}

fn layer_norm_backward(g: &Array, x: &Array) -> Array {
    let c = x.cols();
    let nf = c as f64;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = &g.data()[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
        let g_mean = gr.iter().sum::<f64>() / nf;
        let gx_mean = gr.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
        out.extend(
            gr.iter()
                .zip(&xhat)
                .map(|(&gi, &xi)| inv * (gi - g_mean - xi * gx_mean)),
        );
    }
    Array::from_vec(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_scalar(graph: &Graph, bindings: &Bindings) -> f64 {
        graph
            .forward(bindings)
            .unwrap()
            .output("out")
            .unwrap()
            .scalar_value()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut gb = GraphBuilder::new();
        let eye = gb.constant(Array::matrix(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let x = gb.input("x", &[3, 2]);
        let y = gb.matmul(eye, x).unwrap();
        gb.output("y", y);
        let graph = gb.finish();

        let xv = Array::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let eval = graph.forward(&b).unwrap();
        assert_eq!(eval.output("y").unwrap(), &xv);
    }

    #[test]
    fn sum_of_squares_value_and_gradient() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[2]);
        let sq = gb.mul(x, x).unwrap();
        let s = gb.sum(sq);
        gb.output("out", s);
        let graph = gb.finish();

        let xv = Array::vector(vec![1.0, 2.0]);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let eval = graph.forward(&b).unwrap();
        assert_eq!(eval.output("out").unwrap().scalar_value(), 5.0);

        let grads = eval.backward("out").unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[2]);
        let c = gb.constant(Array::vector(vec![3.0, 4.0]));
        let s = gb.sum(c);
        let _ = x;
        gb.output("out", s);
        let graph = gb.finish();

        let xv = Array::vector(vec![1.0, 1.0]);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let eval = graph.forward(&b).unwrap();
        let grads = eval.backward("out").unwrap();
        // x does not influence the output, so no gradient is reported.
        assert!(grads.get("x").is_none());
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[2]);
        gb.output("out", x);
        let graph = gb.finish();
        let xv = Array::vector(vec![1.0, 2.0]);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let eval = graph.forward(&b).unwrap();
        assert!(matches!(
            eval.backward("out"),
            Err(GradError::NonScalarSeed(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut gb = GraphBuilder::new();
        let a = gb.input("a", &[2, 3]);
        let b = gb.input("b", &[3, 3]);
        let err = gb.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("'a'") && msg.contains("'b'"), "{msg}");
    }

    #[test]
    fn unbound_input_reported() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[1]);
        gb.output("out", x);
        let graph = gb.finish();
        let b = Bindings::new();
        assert!(matches!(
            graph.forward(&b),
            Err(GradError::UnboundInput(ref n)) if n == "x"
        ));
    }

    #[test]
    fn forward_is_pure() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[4]);
        let s = gb.sigmoid(x);
        let ln = gb.log(s);
        let out = gb.sum(ln);
        gb.output("out", out);
        let graph = gb.finish();

        let xv = Array::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let mut b = Bindings::new();
        b.bind("x", &xv);
        let v1 = eval_scalar(&graph, &b);
        let v2 = eval_scalar(&graph, &b);
        assert_eq!(v1.to_bits(), v2.to_bits());
    }
}
