//! ANN to SNN conversion and bias calibration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{eval_op, ModelGraph, Node, Op, Tensor};
use crate::error::{Error, Result};
use crate::neurons::{FiringMechanism, NeuronKind};
use crate::schedules::{solve_signgd_coefficients, solve_subgrad_coefficients, Parameterization, Schedule};

/// Neuron family used for every spiking layer of a converted graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Sign-gradient neurons with signed spike coding. Any supported nonlinearity.
    SignGd,
    /// Rate-coded subgradient neurons. ReLU only, on a normalized graph.
    Subgrad,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::SignGd => "signgd",
            Family::Subgrad => "subgrad",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signgd" => Ok(Family::SignGd),
            "subgrad" => Ok(Family::Subgrad),
            _ => Err(Error::UnknownMechanism(format!("unknown neuron family `{s}`"))),
        }
    }
}

/// Spiking graph: the ANN DAG with nonlinearities replaced by neuron layers.
/// Node ids match the graph it was converted from.
#[derive(Debug, Clone, PartialEq)]
pub struct SnnGraph {
    pub graph: ModelGraph,
    pub family: Family,
    pub schedule: Schedule,
    pub param: Parameterization,
    /// Calibrated weight sums of the readout currents.
    pub readout_w: Tensor,
    /// Calibrated idle readout currents.
    pub readout_b: Tensor,
}

impl SnnGraph {
    /// Ids of the spiking layers in execution order.
    pub fn neuron_ids(&self) -> Vec<&str> {
        self.graph
            .nodes()
            .iter()
            .filter(|n| matches!(n.op, Op::Neuron { .. }))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Total number of neurons.
    pub fn neuron_count(&self) -> usize {
        self.graph
            .nodes()
            .iter()
            .filter(|n| matches!(n.op, Op::Neuron { .. }))
            .map(|n| n.shape.iter().product::<usize>())
            .sum()
    }
}

fn mechanism(op: &Op) -> Option<FiringMechanism> {
    Some(match op {
        Op::Relu => FiringMechanism::Relu,
        Op::LeakyRelu { delta } => FiringMechanism::LeakyRelu { delta: *delta },
        Op::Gelu => FiringMechanism::Gelu,
        Op::Max2 => FiringMechanism::Max2,
        Op::Square => FiringMechanism::Square,
        Op::MulInvSqrt => FiringMechanism::MulInvSqrt,
        _ => return None,
    })
}

/// Average pooling as a conv with fixed per-channel weights `1 / (kh kw)`.
fn avgpool_as_conv(channels: usize, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Op {
    let k = kernel[0] * kernel[1];
    let mut w = vec![0.0; channels * channels * k];
    for c in 0..channels {
        for j in 0..k {
            w[(c * channels + c) * k + j] = 1.0 / k as f64;
        }
    }
    Op::Conv2d {
        weight: Tensor { shape: vec![channels, channels, kernel[0], kernel[1]], data: w },
        bias: Tensor::zeros(vec![channels]),
        stride,
        padding,
    }
}

/// Replaces every nonlinearity with a spiking layer of `family` and calibrates
/// the result. Max pools and layer norms must be decomposed first.
pub fn convert(g: &ModelGraph, family: Family, schedule: Schedule, param: Parameterization) -> Result<SnnGraph> {
    match family {
        Family::SignGd => {
            solve_signgd_coefficients(schedule, param)?;
        }
        Family::Subgrad => {
            solve_subgrad_coefficients(schedule)?;
        }
    }
    let mut nodes: Vec<Node> = Vec::with_capacity(g.nodes().len());
    for n in g.nodes() {
        let conv_err = |reason: &str| Error::Conversion { node: n.id.clone(), reason: reason.to_string() };
        let mut m = n.clone();
        match &n.op {
            Op::MaxPool2d { .. } => return Err(conv_err("max pooling must be decomposed into max2 layers first")),
            Op::LayerNorm { .. } => return Err(conv_err("layer norm must be decomposed first")),
            Op::Neuron { .. } => return Err(conv_err("graph is already spiking")),
            Op::AvgPool2d { kernel, stride, padding } => {
                m.op = avgpool_as_conv(n.shape[0], *kernel, *stride, *padding);
            }
            op if op.is_neuron_target() => {
                let mech = mechanism(op).expect("neuron target");
                let kind = match family {
                    Family::SignGd => NeuronKind::SignGd { mech },
                    Family::Subgrad if mech == FiringMechanism::Relu => NeuronKind::Subgrad,
                    Family::Subgrad => {
                        return Err(conv_err(&format!(
                            "{} has no subgradient-neuron form; only relu converts to this family",
                            op.name()
                        )))
                    }
                };
                let zeros = Tensor::zeros(n.shape.clone());
                let d = mech.arity();
                m.op = Op::Neuron { kind, w: vec![zeros.clone(); d], b: vec![zeros; d] };
            }
            _ => {}
        }
        nodes.push(m);
    }
    let out_shape = g.output_shape().to_vec();
    let mut snn = SnnGraph {
        graph: ModelGraph::new(nodes)?,
        family,
        schedule,
        param,
        readout_w: Tensor::zeros(out_shape.clone()),
        readout_b: Tensor::zeros(out_shape),
    };
    calibrate(&mut snn)?;
    Ok(snn)
}

/// One pass in which the input and every spiking layer emit `fill`.
/// Returns every node's current frame.
fn constant_pass(g: &ModelGraph, fill: f64) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(g.nodes().len());
    for (i, n) in g.nodes().iter().enumerate() {
        let size = n.shape.iter().product();
        let v = match n.op {
            Op::Input | Op::Neuron { .. } => vec![fill; size],
            _ => {
                let ins: Vec<&[f64]> = g.inputs_of(i).iter().map(|&j| acts[j].as_slice()).collect();
                let shapes: Vec<&[usize]> = g.inputs_of(i).iter().map(|&j| g.nodes()[j].shape.as_slice()).collect();
                let mut out = Vec::new();
                eval_op(&n.op, &ins, &shapes, &n.shape, &mut out);
                out
            }
        };
        acts.push(v);
    }
    acts
}

/// Measures, for every spiking operand and for the readout, the current
/// `I+` when all upstream emitters send 1 and `I-` when they send 0, then
/// stores `W = I+ - I-` and `b = I-`.
pub fn calibrate(snn: &mut SnnGraph) -> Result<()> {
    let g = &snn.graph;
    let hi = constant_pass(g, 1.0);
    let lo = constant_pass(g, 0.0);
    let mut nodes = g.nodes().to_vec();
    for (i, n) in nodes.iter_mut().enumerate() {
        if let Op::Neuron { w, b, .. } = &mut n.op {
            for (k, &j) in g.inputs_of(i).iter().enumerate() {
                w[k].data = hi[j].iter().zip(&lo[j]).map(|(p, q)| p - q).collect();
                b[k].data = lo[j].clone();
            }
        }
    }
    let o = g.output_index();
    snn.readout_w.data = hi[o].iter().zip(&lo[o]).map(|(p, q)| p - q).collect();
    snn.readout_b.data = lo[o].clone();
    snn.graph = ModelGraph::new(nodes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{prepare, GraphBuilder};

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn calibration_is_signed_row_sum() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let d = b.dense(&x, t(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]), t(&[2], vec![0.25, -1.0]));
        let r = b.unary(&d, Op::Relu);
        let o = b.dense(&r, t(&[1, 2], vec![2.0, -1.0]), t(&[1], vec![0.5]));
        b.output(&o);
        let g = b.build().unwrap();
        let s = convert(&g, Family::SignGd, Schedule::inverse(1.0).unwrap(), Parameterization::Canonical).unwrap();
        let Op::Neuron { w, b, .. } = &s.graph.node("relu_2").unwrap().op else { panic!() };
        assert_eq!(w[0].data, vec![-0.5, 4.0]);
        assert_eq!(b[0].data, vec![0.25, -1.0]);
        assert_eq!(s.readout_w.data, vec![1.0]);
        assert_eq!(s.readout_b.data, vec![0.5]);
    }

    #[test]
    fn subgrad_rejects_non_relu() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let r = b.unary(&x, Op::Gelu);
        b.output(&r);
        let g = b.build().unwrap();
        let err = convert(&g, Family::Subgrad, Schedule::inverse(1.0).unwrap(), Parameterization::Canonical)
            .unwrap_err();
        assert!(matches!(err, Error::Conversion { ref node, .. } if node == "gelu_1"), "{err}");
    }

    #[test]
    fn undecomposed_pool_rejected_then_accepted() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1, 4, 4]);
        let p = b.unary(&x, Op::MaxPool2d { kernel: [2, 2], stride: [2, 2] });
        let a = b.unary(&p, Op::AvgPool2d { kernel: [2, 2], stride: [2, 2], padding: [0, 0] });
        b.output(&a);
        let g = b.build().unwrap();
        let s = Schedule::inverse(1.0).unwrap();
        assert!(matches!(
            convert(&g, Family::SignGd, s, Parameterization::Canonical),
            Err(Error::Conversion { .. })
        ));
        let snn = convert(&prepare(&g).unwrap(), Family::SignGd, s, Parameterization::Canonical).unwrap();
        assert!(snn.neuron_ids().len() == 2);
        assert!(matches!(snn.graph.node("avgpool2d_2").unwrap().op, Op::Conv2d { .. }));
    }

    #[test]
    fn unit_current_needs_exponential() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let r = b.unary(&x, Op::Relu);
        b.output(&r);
        let g = b.build().unwrap();
        assert!(matches!(
            convert(&g, Family::SignGd, Schedule::inverse(1.0).unwrap(), Parameterization::UnitCurrent),
            Err(Error::ParameterizationMismatch(_))
        ));
    }
}
