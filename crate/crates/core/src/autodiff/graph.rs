use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{kernels, Array, AutodiffError};

/// Recorded operation kinds. Each variant carries whatever static metadata
/// its forward kernel and gradient rule need; tensor inputs live on the node.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Shift(f64),
    MatMul,
    Transpose,
    Sum,
    /// Broadcast a one-element tensor to the stored shape.
    Broadcast(Vec<usize>),
    Abs,
    Exp,
    Log,
    Recip,
    Tanh,
    /// Row gather from a `[rows, d]` table.
    Gather(Rc<[usize]>),
    /// Scatter-add of `[n, d]` rows into a zero `[rows, d]` table.
    ScatterAdd { indices: Rc<[usize]>, rows: usize },
    ConcatRows,
    SliceRows { start: usize, len: usize },
    Reshape(Vec<usize>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Sum => "sum",
            Op::Broadcast(_) => "broadcast",
            Op::Abs => "abs",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Recip => "recip",
            Op::Tanh => "tanh",
            Op::Gather(_) => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::ConcatRows => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(_) => "reshape",
        }
    }
}

/// An operation input: either another node of the same graph or a constant
/// captured by value.
#[derive(Clone, Debug)]
pub(crate) enum Input {
    Node(usize),
    Const(Rc<Array>),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Input>,
    pub(crate) value: Rc<Array>,
}

#[derive(Debug, Default)]
struct GraphInner {
    nodes: Vec<Node>,
    generation: u64,
}

/// Append-only record of operations. Cloning a `Graph` clones the handle,
/// not the recording.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Graph")
            .field("nodes", &inner.nodes.len())
            .field("generation", &inner.generation)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a differentiable leaf.
    pub fn var(&self, value: Array) -> Tensor {
        let value = Rc::new(value);
        let id = self.push(Node { op: Op::Leaf, inputs: Vec::new(), value: value.clone() });
        Tensor { value, node: Some(self.node_ref(id)) }
    }

    /// Register every array as a leaf, in order.
    pub fn vars(&self, values: &[Array]) -> Vec<Tensor> {
        values.iter().map(|v| self.var(v.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generation(&self) -> u64 {
        self.inner.borrow().generation
    }

    /// Drop all recorded nodes. Tensors from earlier generations become
    /// stale and are rejected by any further operation.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    /// Re-evaluate every recorded node in order from its inputs.
    pub fn replay(&self) -> Result<Vec<Array>, AutodiffError> {
        let inner = self.inner.borrow();
        let mut out: Vec<Rc<Array>> = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            if node.op == Op::Leaf {
                out.push(node.value.clone());
                continue;
            }
            let inputs: Vec<Rc<Array>> = node
                .inputs
                .iter()
                .map(|i| match i {
                    Input::Node(j) => out[*j].clone(),
                    Input::Const(a) => a.clone(),
                })
                .collect();
            let refs: Vec<&Array> = inputs.iter().map(|a| a.as_ref()).collect();
            out.push(Rc::new(kernels::eval(&node.op, &refs)?));
        }
        Ok(out.into_iter().map(|a| (*a).clone()).collect())
    }

    /// Recorded values, for comparison with [`Graph::replay`].
    pub fn recorded_values(&self) -> Vec<Array> {
        self.inner.borrow().nodes.iter().map(|n| (*n.value).clone()).collect()
    }

    pub(crate) fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn node_ref(&self, id: usize) -> NodeRef {
        NodeRef { graph: self.clone(), id, generation: self.generation() }
    }

    /// Snapshot of a node's op and inputs, taken without holding the borrow.
    pub(crate) fn node_parts(&self, id: usize) -> (Op, Vec<Input>, Rc<Array>) {
        let inner = self.inner.borrow();
        let n = &inner.nodes[id];
        (n.op.clone(), n.inputs.clone(), n.value.clone())
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Array> {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub(crate) fn tensor(&self, id: usize) -> Tensor {
        Tensor { value: self.value(id), node: Some(self.node_ref(id)) }
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
    pub(crate) generation: u64,
}

/// A dense value that may be attached to a [`Graph`] node.
///
/// Tensors without a node are constants: operations on constants only
/// produce constants and record nothing.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) value: Rc<Array>,
    pub(crate) node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl Tensor {
    pub fn constant(value: Array) -> Self {
        Self { value: Rc::new(value), node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn to_array(&self) -> Array {
        (*self.value).clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor { value: self.value.clone(), node: None }
    }

    pub(crate) fn check_live(&self) -> Result<(), AutodiffError> {
        if let Some(n) = &self.node {
            let current = n.graph.generation();
            if n.generation != current {
                return Err(AutodiffError::StaleTensor { tensor: n.generation, graph: current });
            }
        }
        Ok(())
    }
}

/// Evaluate `op` on `inputs` and, if any input is attached, record the
/// result as a new node.
pub(crate) fn record(op: Op, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let mut graph: Option<&Graph> = None;
    for t in inputs {
        t.check_live()?;
        if let Some(n) = &t.node {
            match graph {
                None => graph = Some(&n.graph),
                Some(g) if !g.same(&n.graph) => return Err(AutodiffError::GraphMismatch),
                Some(_) => {}
            }
        }
    }
    let values: Vec<&Array> = inputs.iter().map(|t| t.value.as_ref()).collect();
    let out = kernels::eval(&op, &values)?;
    if !out.is_finite() {
        return Err(AutodiffError::NonFinite { op: op.name() });
    }
    let value = Rc::new(out);
    let Some(graph) = graph else {
        return Ok(Tensor { value, node: None });
    };
    let node_inputs = inputs
        .iter()
        .map(|t| match &t.node {
            Some(n) => Input::Node(n.id),
            None => Input::Const(t.value.clone()),
        })
        .collect();
    let graph = graph.clone();
    let id = graph.push(Node { op, inputs: node_inputs, value: value.clone() });
    Ok(Tensor { value, node: Some(graph.node_ref(id)) })
}
