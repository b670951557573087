//! Function-preserving rewrites applied before conversion.

use std::collections::HashMap;

use super::ops::channel_axis;
use super::{ModelGraph, Node, Op, Tensor};
use crate::error::{Error, Result};

fn consumers<'a>(nodes: &'a [Node], id: &str) -> Vec<&'a Node> {
    nodes.iter().filter(|n| n.inputs.iter().any(|i| i == id)).collect()
}

fn redirect(nodes: &mut [Node], from: &str, to: &str, skip: &str) {
    for n in nodes.iter_mut().filter(|n| n.id != skip) {
        for i in n.inputs.iter_mut() {
            if i == from {
                *i = to.to_string();
            }
        }
    }
}

/// Scales output channel `c` of a dense or conv node (weights and bias) by `f(c)`.
fn scale_out_channels(op: &mut Op, f: impl Fn(usize) -> f64) {
    match op {
        Op::Dense { weight, bias } | Op::Conv2d { weight, bias, .. } => {
            let per = weight.len() / weight.shape[0];
            for (k, w) in weight.data.iter_mut().enumerate() {
                *w *= f(k / per);
            }
            for (c, b) in bias.data.iter_mut().enumerate() {
                *b *= f(c);
            }
        }
        _ => unreachable!("only dense and conv nodes are rescaled"),
    }
}

/// Folds every batchnorm into the dense or conv node that feeds it.
///
/// The producer must be dense or conv, must have the batchnorm as its only
/// consumer, and its output channels must line up with the normalized axis.
pub fn fold_batchnorm(g: &ModelGraph) -> Result<ModelGraph> {
    let mut nodes = g.nodes().to_vec();
    while let Some(k) = nodes.iter().position(|n| matches!(n.op, Op::BatchNorm { .. })) {
        let bn = nodes.remove(k);
        let Op::BatchNorm { gamma, beta, mean, var, eps } = &bn.op else { unreachable!() };
        let pid = bn.inputs[0].clone();
        let sole = consumers(&nodes, &pid).is_empty();
        let p = nodes.iter_mut().find(|n| n.id == pid).expect("validated graph");
        let aligned = match p.op {
            Op::Conv2d { .. } => true,
            Op::Dense { .. } => channel_axis(&p.shape) == p.shape.len() - 1,
            _ => false,
        };
        if !sole || !aligned {
            return Err(Error::UnsupportedPattern(format!(
                "batchnorm `{}` has no foldable dense/conv producer (`{pid}` is {}{})",
                bn.id,
                p.op.name(),
                if sole { "" } else { " with other consumers" }
            )));
        }
        let scale: Vec<f64> = gamma.data.iter().zip(&var.data).map(|(g, v)| g / (v + eps).sqrt()).collect();
        scale_out_channels(&mut p.op, |c| scale[c]);
        if let Op::Dense { bias, .. } | Op::Conv2d { bias, .. } = &mut p.op {
            for (c, b) in bias.data.iter_mut().enumerate() {
                *b += beta.data[c] - mean.data[c] * scale[c];
            }
        }
        redirect(&mut nodes, &bn.id, &pid, "");
    }
    ModelGraph::new(nodes)
}

/// Outcome of [`normalize_relu`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalizeReport {
    /// `(relu id, observed maximum)` for every rescaled layer.
    pub scaled: Vec<(String, f64)>,
    /// ReLU layers left untouched because they never activated.
    pub skipped: Vec<String>,
}

/// Rescales every ReLU so its activations over `calib` stay within `[0, 1]`.
///
/// With `M` the maximum activation of a ReLU, the producer is divided by `M`
/// (folded into a sole dense/conv producer, otherwise through a new scale
/// node) and the consumers are multiplied by `M` (folded when every consumer
/// is dense/conv, otherwise through a new scale node). `M` is stored as
/// `relu_max` in the node's metadata.
pub fn normalize_relu(g: &ModelGraph, calib: &[Tensor]) -> Result<(ModelGraph, NormalizeReport)> {
    let relus: Vec<usize> = (0..g.nodes().len()).filter(|&i| matches!(g.nodes()[i].op, Op::Relu)).collect();
    let mut maxima = vec![0.0f64; relus.len()];
    for x in calib {
        let acts = g.forward(x)?;
        for (m, &i) in maxima.iter_mut().zip(&relus) {
            *m = acts[i].iter().copied().fold(*m, f64::max);
        }
    }
    let mut nodes = g.nodes().to_vec();
    let mut report = NormalizeReport::default();
    for (&i, &m) in relus.iter().zip(&maxima) {
        let rid = g.nodes()[i].id.clone();
        if !(m > 0.0) || !m.is_finite() {
            report.skipped.push(rid);
            continue;
        }
        // producer side
        let pid = nodes.iter().find(|n| n.id == rid).expect("present").inputs[0].clone();
        let sole = consumers(&nodes, &pid).len() == 1;
        let p = nodes.iter_mut().find(|n| n.id == pid).expect("present");
        if sole && matches!(p.op, Op::Dense { .. } | Op::Conv2d { .. }) {
            scale_out_channels(&mut p.op, |_| 1.0 / m);
        } else {
            let pre = format!("{rid}.pre");
            nodes.push(Node::new(pre.clone(), Op::Scale { factor: 1.0 / m }, vec![pid]));
            nodes.iter_mut().find(|n| n.id == rid).expect("present").inputs = vec![pre];
        }
        // consumer side
        let cons: Vec<String> = consumers(&nodes, &rid).iter().map(|n| n.id.clone()).collect();
        let foldable = !cons.is_empty()
            && cons.iter().all(|c| {
                let n = nodes.iter().find(|n| &n.id == c).expect("present");
                matches!(n.op, Op::Dense { .. } | Op::Conv2d { .. })
            });
        if foldable {
            for c in &cons {
                let n = nodes.iter_mut().find(|n| &n.id == c).expect("present");
                if let Op::Dense { weight, .. } | Op::Conv2d { weight, .. } = &mut n.op {
                    weight.data.iter_mut().for_each(|w| *w *= m);
                }
            }
        } else {
            let post = format!("{rid}.post");
            redirect(&mut nodes, &rid, &post, "");
            nodes.push(Node::new(post, Op::Scale { factor: m }, vec![rid.clone()]));
        }
        nodes.iter_mut().find(|n| n.id == rid).expect("present").meta.insert("relu_max".into(), m);
        report.scaled.push((rid, m));
    }
    Ok((ModelGraph::new(nodes)?, report))
}

/// Number of `max2` units per pooling window and the tree depth of the
/// decomposition of a `kr x kc` window.
pub fn maxpool_tree_census(kernel: [usize; 2]) -> (usize, usize) {
    let depth = |k: usize| (usize::BITS - (k.max(1) - 1).leading_zeros()) as usize;
    (kernel[0] * kernel[1] - 1, depth(kernel[0]) + depth(kernel[1]))
}

type Ref = (String, u32);

fn gather(id: String, refs: &[Ref], shape: Vec<usize>) -> Node {
    let mut sources: Vec<String> = Vec::new();
    let mut slots = Vec::with_capacity(refs.len());
    let mut index = Vec::with_capacity(refs.len());
    for (src, i) in refs {
        let s = match sources.iter().position(|x| x == src) {
            Some(s) => s,
            None => {
                sources.push(src.clone());
                sources.len() - 1
            }
        };
        slots.push(s as u32);
        index.push(*i);
    }
    Node::new(id, Op::Gather { slots, index, shape }, sources)
}

/// Pairwise elimination over every lane in lockstep. Odd lanes carry their
/// last element to the next round.
fn tournament(mut lanes: Vec<Vec<Ref>>, prefix: &str, nodes: &mut Vec<Node>) -> Vec<Ref> {
    let mut round = 0;
    while lanes.first().is_some_and(|l| l.len() > 1) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for lane in &lanes {
            for p in 0..lane.len() / 2 {
                a.push(lane[2 * p].clone());
                b.push(lane[2 * p + 1].clone());
            }
        }
        let (ga, gb, m) = (format!("{prefix}.r{round}.a"), format!("{prefix}.r{round}.b"), format!("{prefix}.r{round}.max"));
        let n = a.len();
        nodes.push(gather(ga.clone(), &a, vec![n]));
        nodes.push(gather(gb.clone(), &b, vec![n]));
        nodes.push(Node::new(m.clone(), Op::Max2, vec![ga, gb]));
        let mut k = 0u32;
        lanes = lanes
            .into_iter()
            .map(|lane| {
                let mut next: Vec<Ref> = (0..lane.len() / 2)
                    .map(|_| {
                        k += 1;
                        (m.clone(), k - 1)
                    })
                    .collect();
                if lane.len() % 2 == 1 {
                    next.push(lane.last().expect("odd lane").clone());
                }
                next
            })
            .collect();
        round += 1;
    }
    lanes.into_iter().map(|mut l| l.pop().expect("non-empty lane")).collect()
}

/// Rewrites every max pool as a tree of two-input `max2` layers: window rows
/// are reduced first, then columns. The final gather keeps the pool's id.
pub fn decompose_maxpool(g: &ModelGraph) -> Result<ModelGraph> {
    let mut nodes = Vec::new();
    for n in g.nodes() {
        let Op::MaxPool2d { kernel, stride } = n.op else {
            nodes.push(n.clone());
            continue;
        };
        let src = &n.inputs[0];
        let in_shape = &g.node(src).expect("validated").shape;
        let (h, w) = (in_shape[1], in_shape[2]);
        let (c, ho, wo) = (n.shape[0], n.shape[1], n.shape[2]);
        let windows: Vec<(usize, usize, usize)> =
            (0..c).flat_map(|ch| (0..ho).flat_map(move |i| (0..wo).map(move |j| (ch, i, j)))).collect();
        let at = |ch: usize, r: usize, q: usize| (src.clone(), ((ch * h + r) * w + q) as u32);
        // row stage: one lane per (window, column)
        let mut lanes = Vec::new();
        for &(ch, i, j) in &windows {
            for b in 0..kernel[1] {
                lanes.push((0..kernel[0]).map(|a| at(ch, i * stride[0] + a, j * stride[1] + b)).collect());
            }
        }
        let cols = tournament(lanes, &format!("{}.rows", n.id), &mut nodes);
        // column stage: one lane per window
        let lanes: Vec<Vec<Ref>> = cols.chunks(kernel[1]).map(|c| c.to_vec()).collect();
        let winners = tournament(lanes, &format!("{}.cols", n.id), &mut nodes);
        nodes.push(gather(n.id.clone(), &winners, n.shape.clone()));
    }
    ModelGraph::new(nodes)
}

/// Rewrites every layer norm as
/// `dense(centering) -> square -> dense(mean + eps) -> broadcast -> mul_inv_sqrt -> dense(gamma, beta)`.
/// The affine output node keeps the layer norm's id.
pub fn decompose_layernorm(g: &ModelGraph) -> Result<ModelGraph> {
    let mut nodes = Vec::new();
    for node in g.nodes() {
        let Op::LayerNorm { gamma, beta, eps } = &node.op else {
            nodes.push(node.clone());
            continue;
        };
        let n = gamma.len();
        let rows = node.shape.iter().product::<usize>() / n;
        let id = &node.id;
        let center = Tensor::new(
            vec![n, n],
            (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 } - 1.0 / n as f64).collect(),
        )?;
        let (c, sq, var, bvar, misr) =
            (format!("{id}.center"), format!("{id}.sq"), format!("{id}.var"), format!("{id}.bvar"), format!("{id}.misr"));
        nodes.push(Node::new(c.clone(), Op::Dense { weight: center, bias: Tensor::zeros(vec![n]) }, node.inputs.clone()));
        nodes.push(Node::new(sq.clone(), Op::Square, vec![c.clone()]));
        let mean = Op::Dense { weight: Tensor::new(vec![1, n], vec![1.0 / n as f64; n])?, bias: Tensor::new(vec![1], vec![*eps])? };
        nodes.push(Node::new(var.clone(), mean, vec![sq]));
        let refs: Vec<Ref> = (0..rows).flat_map(|r| std::iter::repeat_n((var.clone(), r as u32), n)).collect();
        nodes.push(gather(bvar.clone(), &refs, node.shape.clone()));
        nodes.push(Node::new(misr.clone(), Op::MulInvSqrt, vec![c, bvar]));
        let diag = Tensor::new(vec![n, n], (0..n * n).map(|k| if k / n == k % n { gamma.data[k % n] } else { 0.0 }).collect())?;
        nodes.push(Node::new(id.clone(), Op::Dense { weight: diag, bias: beta.clone() }, vec![misr]));
    }
    ModelGraph::new(nodes)
}

/// Folds batchnorm, then decomposes max pools and layer norms.
pub fn prepare(g: &ModelGraph) -> Result<ModelGraph> {
    decompose_layernorm(&decompose_maxpool(&fold_batchnorm(g)?)?)
}

/// Count of nodes per op name; handy for structural assertions.
pub fn op_census(g: &ModelGraph) -> HashMap<&'static str, usize> {
    let mut m = HashMap::new();
    for n in g.nodes() {
        *m.entry(n.op.name()).or_insert(0) += 1;
    }
    m
}
