use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{dot, matmul_into, matmul_nt_into, matmul_tn_into, GraphError, Tensor, DEGENERATE_NORM};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Leaf. Either carries a value or must be bound at evaluation.
    Input,
    MatMul,
    Add,
    Mul,
    Relu,
    Exp,
    Log,
    /// Sum of every element into a 1×1 tensor.
    Sum,
    Scale(f64),
    ConcatRows,
    ConcatCols,
    Transpose,
    L2NormalizeRows,
    /// Row-wise inner products of two B×D matrices, giving B×1.
    DotRows,
    /// Mean over rows of `-log softmax(logits_i)[target_i]`, giving 1×1.
    LogSoftmaxNll(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Scale(_) => "scale",
            Op::ConcatRows => "concat-rows",
            Op::ConcatCols => "concat-cols",
            Op::Transpose => "transpose",
            Op::L2NormalizeRows => "rowwise-l2-normalize",
            Op::DotRows => "dot-rows",
            Op::LogSoftmaxNll(_) => "log-softmax-nll",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    requires_grad: bool,
    value: Option<Tensor>,
}

/// An append-only, topologically ordered compute graph.
///
/// Builders validate shapes eagerly, so a graph that was built without error
/// can only fail evaluation on unbound inputs or non-finite values.
#[derive(Clone, Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Node outputs of one evaluation pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    graph_id: u64,
    values: Vec<Tensor>,
    /// Softmax probabilities kept from the forward pass of loss nodes.
    aux: Vec<Option<Tensor>>,
    degenerate: Vec<(NodeId, usize)>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// `(node, row)` pairs where row normalization met a near-zero row and
    /// passed it through unchanged.
    pub fn degenerate_rows(&self) -> &[(NodeId, usize)] {
        &self.degenerate
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor {
        self.values.swap_remove(id.0)
    }
}

/// Gradients of a scalar loss, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, present for every node that requires a gradient.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
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

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Operands of `id`, empty for leaves.
    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Embedded value of an input node, if any.
    pub fn input_value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    /// Placeholder leaf that must be bound at evaluation time.
    pub fn placeholder(&mut self, shape: Vec<usize>, requires_grad: bool) -> NodeId {
        self.push_leaf(shape, requires_grad, None)
    }

    /// Leaf with a fixed value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value.shape().to_vec(), false, Some(value))
    }

    /// Leaf with a default value that receives a gradient.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value.shape().to_vec(), true, Some(value))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, requires_grad: bool, value: Option<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            inputs: Vec::new(),
            shape,
            requires_grad,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_ids(&self, ids: &[NodeId]) -> Result<(), GraphError> {
        match ids.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(GraphError::UnknownNode { node: id.0 }),
            None => Ok(()),
        }
    }

    fn mismatch(&self, op: &Op, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: self.nodes.len(),
            op: op.name(),
            detail,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, GraphError> {
        self.check_ids(&inputs)?;
        let shapes: Vec<&[usize]> = inputs.iter().map(|i| self.shape(*i)).collect();
        let rank2 = |s: &[usize]| s.len() == 2;
        let shape = match &op {
            Op::Input => unreachable!("leaves are pushed by push_leaf"),
            Op::MatMul => {
                let (a, b) = (shapes[0], shapes[1]);
                if !rank2(a) || !rank2(b) || a[1] != b[0] {
                    return Err(self.mismatch(&op, format!("{a:?} x {b:?}")));
                }
                vec![a[0], b[1]]
            }
            Op::Add | Op::Mul => {
                if shapes[0] != shapes[1] {
                    return Err(self.mismatch(&op, format!("{:?} vs {:?}", shapes[0], shapes[1])));
                }
                shapes[0].to_vec()
            }
            Op::Relu | Op::Exp | Op::Log | Op::Scale(_) => shapes[0].to_vec(),
            Op::Sum => vec![1, 1],
            Op::ConcatRows => {
                if shapes.is_empty() {
                    return Err(self.mismatch(&op, "no inputs".into()));
                }
                let cols = shapes[0].get(1).copied();
                if shapes.iter().any(|s| !rank2(s) || Some(s[1]) != cols) {
                    return Err(self.mismatch(&op, format!("column counts differ: {shapes:?}")));
                }
                vec![shapes.iter().map(|s| s[0]).sum(), shapes[0][1]]
            }
            Op::ConcatCols => {
                if shapes.is_empty() {
                    return Err(self.mismatch(&op, "no inputs".into()));
                }
                let rows = shapes[0].first().copied();
                if shapes.iter().any(|s| !rank2(s) || Some(s[0]) != rows) {
                    return Err(self.mismatch(&op, format!("row counts differ: {shapes:?}")));
                }
                vec![shapes[0][0], shapes.iter().map(|s| s[1]).sum()]
            }
            Op::Transpose => {
                if !rank2(shapes[0]) {
                    return Err(self.mismatch(&op, format!("rank-2 required, got {:?}", shapes[0])));
                }
                vec![shapes[0][1], shapes[0][0]]
            }
            Op::L2NormalizeRows => {
                if !rank2(shapes[0]) {
                    return Err(self.mismatch(&op, format!("rank-2 required, got {:?}", shapes[0])));
                }
                shapes[0].to_vec()
            }
            Op::DotRows => {
                if !rank2(shapes[0]) || shapes[0] != shapes[1] {
                    return Err(self.mismatch(&op, format!("{:?} vs {:?}", shapes[0], shapes[1])));
                }
                vec![shapes[0][0], 1]
            }
            Op::LogSoftmaxNll(targets) => {
                let s = shapes[0];
                if !rank2(s) || targets.len() != s[0] || targets.iter().any(|&t| t >= s[1]) {
                    return Err(self.mismatch(&op, format!("logits {s:?} with {} targets", targets.len())));
                }
                vec![1, 1]
            }
        };
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            requires_grad,
            value: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Relu, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Log, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Sum, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        self.push(Op::Scale(factor), vec![a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        self.push(Op::ConcatRows, parts.to_vec())
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::Transpose, vec![a])
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::L2NormalizeRows, vec![a])
    }

    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(Op::DotRows, vec![a, b])
    }

    pub fn log_softmax_nll(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId, GraphError> {
        self.push(Op::LogSoftmaxNll(targets), vec![logits])
    }

    /// `a - b`, built from `add` and `scale`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        self.push(Op::ConcatCols, parts.to_vec())
    }

    /// Runs every node forward. `inputs` overrides embedded leaf values.
    pub fn evaluate(&self, inputs: &HashMap<NodeId, Tensor>) -> Result<Evaluation, GraphError> {
        for id in inputs.keys() {
            self.check_ids(&[*id])?;
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        let mut degenerate = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let (out, kept) = if node.op == Op::Input {
                let v = inputs
                    .get(&NodeId(idx))
                    .or(node.value.as_ref())
                    .ok_or(GraphError::UnboundInput { node: idx })?;
                if v.shape() != node.shape.as_slice() {
                    return Err(GraphError::BindingShape {
                        node: idx,
                        expected: node.shape.clone(),
                        got: v.shape().to_vec(),
                    });
                }
                (v.clone(), None)
            } else {
                let args: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
                forward(&node.op, &args, &node.shape, |row| degenerate.push((NodeId(idx), row)))
            };
            if let Some(index) = out.values().iter().position(|v| !v.is_finite()) {
                return Err(GraphError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                    index,
                });
            }
            values.push(out);
            aux.push(kept);
        }
        Ok(Evaluation {
            graph_id: self.id,
            values,
            aux,
            degenerate,
        })
    }

    /// Reverse pass from a scalar `loss`. Gradients are produced for every
    /// node on a path from a gradient-requiring leaf to the loss.
    pub fn backpropagate(&self, eval: &Evaluation, loss: NodeId) -> Result<Gradients, GraphError> {
        if eval.graph_id != self.id || eval.values.len() != self.nodes.len() {
            return Err(GraphError::NotEvaluated);
        }
        self.check_ids(&[loss])?;
        let lshape = &self.nodes[loss.0].shape;
        if lshape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarLoss {
                node: loss.0,
                shape: lshape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lshape.clone(), vec![1.0]).expect("scalar"));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.op == Op::Input || !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let args: Vec<&Tensor> = node.inputs.iter().map(|i| &eval.values[i.0]).collect();
            let wants: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let out = eval.aux[idx].as_ref().unwrap_or(&eval.values[idx]);
            let local = backward(&node.op, &args, out, &upstream, &wants);
            for (input, g) in node.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.values_mut().iter_mut().zip(g.values()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            } else if grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.shape.clone()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.values().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let v = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), v).expect("same shape")
}

/// Output value, plus the softmax probabilities for the loss node.
fn forward(op: &Op, args: &[&Tensor], shape: &[usize], flag: impl FnMut(usize)) -> (Tensor, Option<Tensor>) {
    if let Op::LogSoftmaxNll(targets) = op {
        let mut probs = args[0].clone();
        let mut total = 0.0;
        let mut sorted = Vec::with_capacity(probs.cols());
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            // Summing in sorted order makes the result independent of column order.
            sorted.clear();
            sorted.extend_from_slice(row);
            sorted.sort_unstable_by(f64::total_cmp);
            let z: f64 = sorted.iter().sum();
            total += m + z.ln() - args[0].get(r, t);
            row.iter_mut().for_each(|v| *v /= z);
        }
        return (Tensor::scalar(total / targets.len() as f64), Some(probs));
    }
    (forward_value(op, args, shape, flag), None)
}

fn forward_value(op: &Op, args: &[&Tensor], shape: &[usize], mut flag: impl FnMut(usize)) -> Tensor {
    match op {
        Op::Input => unreachable!(),
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            matmul_into(a.values(), b.values(), m, k, n, &mut out);
            Tensor::matrix(m, n, out)
        }
        Op::Add => zip_map(args[0], args[1], |x, y| x + y),
        Op::Mul => zip_map(args[0], args[1], |x, y| x * y),
        Op::Relu => map(args[0], |x| if x > 0.0 { x } else { 0.0 }),
        Op::Exp => map(args[0], f64::exp),
        Op::Log => map(args[0], f64::ln),
        Op::Sum => Tensor::scalar(args[0].values().iter().sum()),
        Op::Scale(c) => map(args[0], |x| c * x),
        Op::ConcatRows => {
            let mut v = Vec::with_capacity(shape.iter().product());
            for a in args {
                v.extend_from_slice(a.values());
            }
            Tensor::new(shape.to_vec(), v).expect("inferred shape")
        }
        Op::ConcatCols => {
            let mut v = Vec::with_capacity(shape.iter().product());
            for r in 0..shape[0] {
                for a in args {
                    v.extend_from_slice(a.row(r));
                }
            }
            Tensor::new(shape.to_vec(), v).expect("inferred shape")
        }
        Op::Transpose => args[0].transpose(),
        Op::L2NormalizeRows => {
            let mut out = args[0].clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let n = dot(row, row).sqrt();
                if n < DEGENERATE_NORM {
                    flag(r);
                } else {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            out
        }
        Op::DotRows => {
            let (a, b) = (args[0], args[1]);
            let v = (0..a.rows()).map(|r| dot(a.row(r), b.row(r))).collect();
            Tensor::matrix(a.rows(), 1, v)
        }
        Op::LogSoftmaxNll(_) => unreachable!("handled in forward"),
    }
}

/// Local vector-Jacobian products. Entries are `None` where the input does
/// not need a gradient. For the loss node `out` holds the softmax probabilities.
fn backward(op: &Op, args: &[&Tensor], out: &Tensor, g: &Tensor, wants: &[bool]) -> Vec<Option<Tensor>> {
    let want = |i: usize| wants.get(i).copied().unwrap_or(false);
    match op {
        Op::Input => vec![],
        Op::MatMul => {
            let (a, b) = (args[0], args[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let ga = want(0).then(|| {
                let mut v = vec![0.0; m * k];
                matmul_nt_into(g.values(), b.values(), m, n, k, &mut v);
                Tensor::matrix(m, k, v)
            });
            let gb = want(1).then(|| {
                let mut v = vec![0.0; k * n];
                matmul_tn_into(a.values(), g.values(), m, k, n, &mut v);
                Tensor::matrix(k, n, v)
            });
            vec![ga, gb]
        }
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Mul => vec![
            want(0).then(|| zip_map(g, args[1], |x, y| x * y)),
            want(1).then(|| zip_map(g, args[0], |x, y| x * y)),
        ],
        Op::Relu => vec![Some(zip_map(g, args[0], |gv, x| if x > 0.0 { gv } else { 0.0 }))],
        Op::Exp => vec![Some(zip_map(g, out, |gv, y| gv * y))],
        Op::Log => vec![Some(zip_map(g, args[0], |gv, x| gv / x))],
        Op::Sum => vec![Some(Tensor::full(args[0].shape().to_vec(), g.item()))],
        Op::Scale(c) => vec![Some(map(g, |x| c * x))],
        Op::ConcatRows => {
            let cols = g.cols();
            let mut offset = 0;
            args.iter()
                .enumerate()
                .map(|(i, a)| {
                    let len = a.rows() * cols;
                    let piece = want(i).then(|| {
                        Tensor::new(a.shape().to_vec(), g.values()[offset..offset + len].to_vec()).expect("same shape")
                    });
                    offset += len;
                    piece
                })
                .collect()
        }
        Op::ConcatCols => {
            let mut offset = 0;
            args.iter()
                .enumerate()
                .map(|(i, a)| {
                    let (rows, cols) = (a.rows(), a.cols());
                    let piece = want(i).then(|| {
                        let mut v = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            v.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        Tensor::matrix(rows, cols, v)
                    });
                    offset += cols;
                    piece
                })
                .collect()
        }
        Op::Transpose => vec![Some(g.transpose())],
        Op::L2NormalizeRows => {
            let x = args[0];
            let mut gx = g.clone();
            for r in 0..x.rows() {
                let n = dot(x.row(r), x.row(r)).sqrt();
                if n < DEGENERATE_NORM {
                    continue;
                }
                let y = out.row(r);
                let gy = g.row(r);
                let yg = dot(y, gy);
                for (j, v) in gx.row_mut(r).iter_mut().enumerate() {
                    *v = (gy[j] - y[j] * yg) / n;
                }
            }
            vec![Some(gx)]
        }
        Op::DotRows => {
            let (a, b) = (args[0], args[1]);
            let scaled = |src: &Tensor| {
                let mut t = src.clone();
                for r in 0..t.rows() {
                    let s = g.get(r, 0);
                    t.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                t
            };
            vec![want(0).then(|| scaled(b)), want(1).then(|| scaled(a))]
        }
        Op::LogSoftmaxNll(targets) => {
            let scale = g.item() / targets.len() as f64;
            let mut gx = map(out, |p| p * scale);
            for (r, &t) in targets.iter().enumerate() {
                gx.row_mut(r)[t] -= scale;
            }
            vec![Some(gx)]
        }
    }
}
