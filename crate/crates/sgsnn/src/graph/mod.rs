//! ANN operator graphs, their spiking counterparts, and the rewrites between them.
//!
//! Nodes reference their inputs by id. [`ModelGraph::new`] checks ids, sorts
//! the nodes topologically (rejecting cycles) and re-derives every shape, so a
//! constructed graph is always executable.

mod convert;
mod io;
mod ops;
mod transforms;
pub mod zoo;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::neurons::NeuronKind;

pub use convert::{calibrate, convert, Family, SnnGraph};
pub use io::{load_labels, load_model, load_snn, load_tensor_file, save_labels, save_model, save_snn, save_tensor_file};
pub use ops::{eval_op, infer_shape};
pub use transforms::{
    decompose_layernorm, decompose_maxpool, fold_batchnorm, maxpool_tree_census, normalize_relu, op_census, prepare,
    NormalizeReport,
};

/// Row-major tensor. Values are held in f64; files store f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Operator kinds. Tensors are stored inline.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Output,
    /// Applied over the last dimension: `weight` is `[out, in]`, `bias` is `[out]`.
    Dense { weight: Tensor, bias: Tensor },
    /// Input `[C, H, W]`, `weight` is `[Cout, Cin, Kh, Kw]`, zero padding.
    Conv2d { weight: Tensor, bias: Tensor, stride: [usize; 2], padding: [usize; 2] },
    /// Zero padding counted in the divisor.
    AvgPool2d { kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2] },
    MaxPool2d { kernel: [usize; 2], stride: [usize; 2] },
    /// Channel axis is 0 for rank-3 inputs and the last axis otherwise.
    BatchNorm { gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, eps: f64 },
    /// Over the last dimension, population variance.
    LayerNorm { gamma: Tensor, beta: Tensor, eps: f64 },
    Relu,
    LeakyRelu { delta: f64 },
    /// Sigmoid approximation `x * sigmoid(1.702 x)`.
    Gelu,
    Add,
    Flatten,
    Transpose { perm: Vec<usize> },
    /// `out[k] = inputs[slot_k][index_k]`, reshaped to `shape`.
    Gather { slots: Vec<u32>, index: Vec<u32>, shape: Vec<usize> },
    /// Multiply by a constant.
    Scale { factor: f64 },
    /// Elementwise max of two equally shaped inputs.
    Max2,
    Square,
    /// Elementwise `a / sqrt(b)`.
    MulInvSqrt,
    /// Spiking layer. `w[k]` and `b[k]` hold the calibration of operand `k`.
    Neuron { kind: NeuronKind, w: Vec<Tensor>, b: Vec<Tensor> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Output => "output",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::LayerNorm { .. } => "layernorm",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Gelu => "gelu",
            Op::Add => "add",
            Op::Flatten => "flatten",
            Op::Transpose { .. } => "transpose",
            Op::Gather { .. } => "gather",
            Op::Scale { .. } => "scale",
            Op::Max2 => "max2",
            Op::Square => "square",
            Op::MulInvSqrt => "mul_inv_sqrt",
            Op::Neuron { .. } => "neuron",
        }
    }

    /// Affine in its inputs, so it can carry spike frames unchanged.
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Op::Output
                | Op::Dense { .. }
                | Op::Conv2d { .. }
                | Op::AvgPool2d { .. }
                | Op::BatchNorm { .. }
                | Op::Add
                | Op::Flatten
                | Op::Transpose { .. }
                | Op::Gather { .. }
                | Op::Scale { .. }
        )
    }

    /// Nonlinearities a neuron layer can replace.
    pub fn is_neuron_target(&self) -> bool {
        matches!(self, Op::Relu | Op::LeakyRelu { .. } | Op::Gelu | Op::Max2 | Op::Square | Op::MulInvSqrt)
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            Op::Input => Some(0),
            Op::Add | Op::Max2 | Op::MulInvSqrt => Some(2),
            Op::Gather { .. } => None,
            Op::Neuron { w, .. } => Some(w.len()),
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    /// Output shape. Re-derived by [`ModelGraph::new`].
    pub shape: Vec<usize>,
    /// Free-form numeric annotations, e.g. `relu_max`.
    pub meta: BTreeMap<String, f64>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Op, inputs: Vec<String>) -> Self {
        Node { id: id.into(), op, inputs, shape: Vec::new(), meta: BTreeMap::new() }
    }
}

/// Validated DAG in topological order with one input and one output node.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    /// `inputs` of every node as indices into `nodes`.
    edges: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

impl ModelGraph {
    /// Validates and topologically sorts `nodes`. Ties keep the given order.
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        let mut pos: HashMap<String, usize> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if pos.insert(n.id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id `{}`", n.id)));
            }
        }
        for n in &nodes {
            for inp in &n.inputs {
                if !pos.contains_key(inp) {
                    return Err(Error::Graph(format!("node `{}` reads unknown node `{inp}`", n.id)));
                }
            }
            if let Some(a) = n.op.arity() {
                if a != n.inputs.len() {
                    return Err(Error::Graph(format!(
                        "node `{}` ({}) expects {a} input(s), has {}",
                        n.id,
                        n.op.name(),
                        n.inputs.len()
                    )));
                }
            } else if n.inputs.is_empty() {
                return Err(Error::Graph(format!("node `{}` has no inputs", n.id)));
            }
        }
        let order = topo_order(&nodes, &pos)?;
        let mut slots: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
        let mut sorted: Vec<Node> = order.iter().map(|&i| slots[i].take().expect("visited once")).collect();
        let index: HashMap<String, usize> =
            sorted.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        let edges: Vec<Vec<usize>> =
            sorted.iter().map(|n| n.inputs.iter().map(|i| index[i]).collect()).collect();

        let n_in = sorted.iter().filter(|n| matches!(n.op, Op::Input)).count();
        let n_out = sorted.iter().filter(|n| matches!(n.op, Op::Output)).count();
        if n_in != 1 || n_out != 1 {
            return Err(Error::Graph(format!("need exactly one input and one output node, found {n_in} and {n_out}")));
        }
        for i in 0..sorted.len() {
            let in_shapes: Vec<&[usize]> = edges[i].iter().map(|&j| sorted[j].shape.as_slice()).collect();
            let shape = match sorted[i].op {
                Op::Input => {
                    if sorted[i].shape.is_empty() {
                        return Err(Error::ShapeMismatch(format!("input `{}` has no shape", sorted[i].id)));
                    }
                    sorted[i].shape.clone()
                }
                _ => infer_shape(&sorted[i].op, &in_shapes)
                    .map_err(|e| annotate(e, &sorted[i].id))?,
            };
            sorted[i].shape = shape;
        }
        Ok(ModelGraph { nodes: sorted, edges, index })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn into_nodes(self) -> Vec<Node> {
        self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Input indices of node `i`.
    pub fn inputs_of(&self, i: usize) -> &[usize] {
        &self.edges[i]
    }

    /// Indices of nodes reading node `i`.
    pub fn consumers_of(&self, i: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&j| self.edges[j].contains(&i)).collect()
    }

    pub fn input_index(&self) -> usize {
        self.nodes.iter().position(|n| matches!(n.op, Op::Input)).expect("validated")
    }

    pub fn output_index(&self) -> usize {
        self.nodes.iter().position(|n| matches!(n.op, Op::Output)).expect("validated")
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[self.input_index()].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output_index()].shape
    }

    /// Producer/consumer pairs in node order.
    pub fn edge_list(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (j, ins) in self.edges.iter().enumerate() {
            for &i in ins {
                out.push((self.nodes[i].id.clone(), self.nodes[j].id.clone()));
            }
        }
        out
    }

    /// Forward pass returning every node's activation (flat, row-major).
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        if x.shape != self.input_shape() {
            return Err(Error::ShapeMismatch(format!(
                "input has shape {:?}, graph expects {:?}",
                x.shape,
                self.input_shape()
            )));
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Input) {
                acts.push(x.data.clone());
                continue;
            }
            if let Op::Neuron { .. } = n.op {
                return Err(Error::Graph(format!("node `{}` is a spiking layer; no ANN semantics", n.id)));
            }
            let ins: Vec<&[f64]> = self.edges[i].iter().map(|&j| acts[j].as_slice()).collect();
            let shapes: Vec<&[usize]> = self.edges[i].iter().map(|&j| self.nodes[j].shape.as_slice()).collect();
            let mut out = Vec::new();
            eval_op(&n.op, &ins, &shapes, &n.shape, &mut out);
            acts.push(out);
        }
        Ok(acts)
    }

    /// Output activation only.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut acts = self.forward(x)?;
        Ok(acts.swap_remove(self.output_index()))
    }
}

fn annotate(e: Error, id: &str) -> Error {
    match e {
        Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("node `{id}`: {m}")),
        other => other,
    }
}

/// Kahn's algorithm, picking the lowest original index first.
fn topo_order(nodes: &[Node], pos: &HashMap<String, usize>) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indeg = vec![0usize; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, node) in nodes.iter().enumerate() {
        for inp in &node.inputs {
            let i = pos[inp];
            indeg[j] += 1;
            out[i].push(j);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&i) = ready.iter().next() {
        ready.remove(&i);
        order.push(i);
        for &j in &out[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert(j);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indeg[i] > 0).expect("some node left");
        return Err(Error::Cycle(nodes[stuck].id.clone()));
    }
    Ok(order)
}

/// Incremental graph construction with automatic ids.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    counter: usize,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a node with an explicit id.
    pub fn push_named(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        self.nodes.push(Node::new(id, op, inputs.iter().map(|s| s.to_string()).collect()));
        id.to_string()
    }

    /// Adds a node with id `<op>_<n>`.
    pub fn push(&mut self, op: Op, inputs: &[&str]) -> String {
        self.counter += 1;
        let id = format!("{}_{}", op.name(), self.counter);
        self.push_named(&id, op, inputs)
    }

    pub fn input(&mut self, shape: &[usize]) -> String {
        let mut n = Node::new("input", Op::Input, Vec::new());
        n.shape = shape.to_vec();
        self.nodes.push(n);
        "input".to_string()
    }

    pub fn dense(&mut self, x: &str, weight: Tensor, bias: Tensor) -> String {
        self.push(Op::Dense { weight, bias }, &[x])
    }

    pub fn conv2d(&mut self, x: &str, weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> String {
        self.push(Op::Conv2d { weight, bias, stride: [stride; 2], padding: [padding; 2] }, &[x])
    }

    pub fn unary(&mut self, x: &str, op: Op) -> String {
        self.push(op, &[x])
    }

    pub fn binary(&mut self, a: &str, b: &str, op: Op) -> String {
        self.push(op, &[a, b])
    }

    pub fn output(&mut self, x: &str) -> String {
        self.push_named("output", Op::Output, &[x])
    }

    pub fn build(self) -> Result<ModelGraph> {
        ModelGraph::new(self.nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelGraph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[4]);
        let w = Tensor::new(vec![2, 4], vec![1.0, 0.0, -1.0, 0.5, 0.0, 2.0, 0.0, -1.0]).unwrap();
        let d = b.dense(&x, w, Tensor::new(vec![2], vec![0.1, -0.2]).unwrap());
        let r = b.unary(&d, Op::Relu);
        b.output(&r);
        b.build().unwrap()
    }

    #[test]
    fn forward_tiny() {
        let g = tiny();
        let y = g.predict(&Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-12);
        assert!((y[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cycle_detected() {
        let mut nodes = tiny().into_nodes();
        // make the dense read the relu
        nodes[1].inputs = vec![nodes[2].id.clone()];
        let err = ModelGraph::new(nodes).unwrap_err();
        assert!(matches!(err, Error::Cycle(_)), "{err}");
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let d = b.dense(&x, Tensor::zeros(vec![2, 4]), Tensor::zeros(vec![2]));
        b.output(&d);
        assert!(matches!(b.build(), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn topo_sort_reorders() {
        let mut nodes = tiny().into_nodes();
        nodes.reverse();
        let g = ModelGraph::new(nodes).unwrap();
        assert!(matches!(g.nodes()[0].op, Op::Input));
        assert!(matches!(g.nodes()[3].op, Op::Output));
    }
}
