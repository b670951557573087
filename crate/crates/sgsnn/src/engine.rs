//! Clock-driven execution of a spiking graph.
//!
//! One step encodes the input, pushes the frame through every node in
//! topological order (affine nodes apply weights and bias, spiking layers run
//! one integrate/fire/reset cycle per neuron) and updates the readout.

use std::fmt;
use std::str::FromStr;

use crate::codec::{Decoder, Encoder, Scheme};
use crate::error::{Error, Result};
use crate::graph::{eval_op, Family, ModelGraph, Op, SnnGraph, Tensor};
use crate::neurons::{subgrad_neuron_step, FiringMechanism, NeuronKind, SignGdNeuronState, SubgradNeuronState};
use crate::schedules::{solve_signgd_coefficients, solve_subgrad_coefficients};

/// Reference ANN forward returning every node's activation.
pub fn ann_forward(g: &ModelGraph, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    g.forward(x)
}

/// How network inputs become per-step frames.
///
/// For the sign-gradient family these select the signed-schedule encoders.
/// For the rate family they select a constant current, deterministic rate
/// spikes, or Poisson spikes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputEncoding {
    Float,
    Deterministic,
    Stochastic { c: f64, seed: u64 },
}

impl fmt::Display for InputEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputEncoding::Float => write!(f, "float"),
            InputEncoding::Deterministic => write!(f, "det"),
            InputEncoding::Stochastic { c, seed } => write!(f, "stoch:{c}:{seed}"),
        }
    }
}

impl FromStr for InputEncoding {
    type Err = Error;
    /// `float`, `det`, `stoch:<c>` or `stoch:<c>:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("unknown encoder `{s}` (expected float, det or stoch:<c>[:<seed>])"));
        match s {
            "float" => Ok(InputEncoding::Float),
            "det" | "deterministic" => Ok(InputEncoding::Deterministic),
            _ => {
                let rest = s.strip_prefix("stoch:").ok_or_else(bad)?;
                let mut it = rest.split(':');
                let c: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let seed: u64 = match it.next() {
                    Some(v) => v.parse().map_err(|_| bad())?,
                    None => 0,
                };
                if it.next().is_some() || !(0.0..=1.0).contains(&c) {
                    return Err(bad());
                }
                Ok(InputEncoding::Stochastic { c, seed })
            }
        }
    }
}

/// Per-element seed derived from a run seed.
fn element_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

#[derive(Debug, Clone)]
enum Layer {
    SignGd(Vec<SignGdNeuronState>),
    Subgrad { states: Vec<SubgradNeuronState>, decoders: Vec<Decoder> },
}

/// Executable state of one spiking graph for one input.
#[derive(Debug, Clone)]
pub struct SnnInstance<'a> {
    snn: &'a SnnGraph,
    t: u64,
    frames: Vec<Vec<f64>>,
    layers: Vec<Option<Layer>>,
    /// Spike count per node since the last reset (zero for non-spiking nodes).
    spikes: Vec<u64>,
    input: Vec<f64>,
    encoding: InputEncoding,
    encoders: Vec<Encoder>,
    readout: Vec<f64>,
    in_idx: usize,
    out_idx: usize,
}

impl<'a> SnnInstance<'a> {
    /// A fresh instance with a zero input and float encoding.
    pub fn new(snn: &'a SnnGraph) -> Result<Self> {
        let g = &snn.graph;
        let mut layers = Vec::with_capacity(g.nodes().len());
        for n in g.nodes() {
            let layer = match &n.op {
                Op::Neuron { kind, w, b } => Some(match (snn.family, kind) {
                    (Family::SignGd, NeuronKind::SignGd { mech }) => {
                        let coeffs = solve_signgd_coefficients(snn.schedule, snn.param)?;
                        let d = mech.arity();
                        let states = (0..w[0].len())
                            .map(|k| {
                                let wk: Vec<f64> = (0..d).map(|j| w[j].data[k]).collect();
                                let bk: Vec<f64> = (0..d).map(|j| b[j].data[k]).collect();
                                SignGdNeuronState::new(coeffs, *mech, &wk, &bk)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Layer::SignGd(states)
                    }
                    (Family::Subgrad, NeuronKind::Subgrad) => {
                        let coeffs = solve_subgrad_coefficients(snn.schedule)?;
                        let size = w[0].len();
                        Layer::Subgrad {
                            states: vec![SubgradNeuronState::new(coeffs, 0.0); size],
                            decoders: vec![Decoder::new(Scheme::Smoothed(snn.schedule)); size],
                        }
                    }
                    (fam, kind) => {
                        return Err(Error::Conversion {
                            node: n.id.clone(),
                            reason: format!("neuron kind {kind} does not belong to family {fam}"),
                        })
                    }
                }),
                _ => None,
            };
            layers.push(layer);
        }
        let n_in = g.input_shape().iter().product();
        let mut inst = SnnInstance {
            snn,
            t: 0,
            frames: g.nodes().iter().map(|n| vec![0.0; n.shape.iter().product()]).collect(),
            layers,
            spikes: vec![0; g.nodes().len()],
            input: vec![0.0; n_in],
            encoding: InputEncoding::Float,
            encoders: Vec::new(),
            readout: Vec::new(),
            in_idx: g.input_index(),
            out_idx: g.output_index(),
        };
        inst.reset();
        Ok(inst)
    }

    pub fn graph(&self) -> &SnnGraph {
        self.snn
    }

    /// Completed steps.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Readout snapshot `r(t)`.
    pub fn readout(&self) -> &[f64] {
        &self.readout
    }

    /// Sets the input and its encoding, then resets.
    pub fn set_input(&mut self, x: &Tensor, encoding: InputEncoding) -> Result<()> {
        if x.shape != self.snn.graph.input_shape() {
            return Err(Error::ShapeMismatch(format!(
                "input has shape {:?}, graph expects {:?}",
                x.shape,
                self.snn.graph.input_shape()
            )));
        }
        self.input = x.data.clone();
        self.encoding = encoding;
        self.reset();
        Ok(())
    }

    /// Restores `t = 0`: neuron initial conditions (including `v(0)` from the
    /// calibrated bias), `r(0) = b_out` for the signed readout, zero counters,
    /// and fresh encoders.
    pub fn reset(&mut self) {
        self.t = 0;
        for layer in self.layers.iter_mut().flatten() {
            match layer {
                Layer::SignGd(states) => states.iter_mut().for_each(|s| s.reset_state()),
                Layer::Subgrad { states, decoders } => {
                    for s in states.iter_mut() {
                        *s = SubgradNeuronState::new(s.coeffs, s.u_pre0);
                    }
                    for d in decoders.iter_mut() {
                        *d = Decoder::new(d.scheme);
                    }
                }
            }
        }
        self.spikes.iter_mut().for_each(|c| *c = 0);
        self.readout = match self.snn.family {
            Family::SignGd => self.snn.readout_b.data.clone(),
            Family::Subgrad => vec![0.0; self.snn.readout_b.len()],
        };
        let s = self.snn.schedule;
        let (family, enc) = (self.snn.family, self.encoding);
        self.encoders = self
            .input
            .iter()
            .enumerate()
            .map(|(k, &x)| match (family, enc) {
                (Family::SignGd, InputEncoding::Float) => Encoder::float(x, s),
                (Family::SignGd, InputEncoding::Deterministic) => Encoder::deterministic(x, s),
                (Family::SignGd, InputEncoding::Stochastic { c, seed }) => {
                    Encoder::stochastic(x, s, c, element_seed(seed, k))
                }
                (Family::Subgrad, InputEncoding::Float) => Encoder::constant(x),
                (Family::Subgrad, InputEncoding::Deterministic) => Encoder::rate_deterministic(x),
                (Family::Subgrad, InputEncoding::Stochastic { seed, .. }) => Encoder::poisson(x, element_seed(seed, k)),
            })
            .collect();
    }

    /// One step driven by the configured encoders.
    pub fn step(&mut self) -> &[f64] {
        let mut frame = std::mem::take(&mut self.frames[self.in_idx]);
        for (v, e) in frame.iter_mut().zip(self.encoders.iter_mut()) {
            *v = e.next();
        }
        self.frames[self.in_idx] = frame;
        self.propagate();
        &self.readout
    }

    /// One step with an externally supplied input frame.
    pub fn step_with(&mut self, input_frame: &[f64]) -> Result<&[f64]> {
        if input_frame.len() != self.frames[self.in_idx].len() {
            return Err(Error::ShapeMismatch(format!(
                "input frame has {} values, expected {}",
                input_frame.len(),
                self.frames[self.in_idx].len()
            )));
        }
        self.frames[self.in_idx].copy_from_slice(input_frame);
        self.propagate();
        Ok(&self.readout)
    }

    fn propagate(&mut self) {
        let g = &self.snn.graph;
        let t = self.t + 1;
        for i in 0..g.nodes().len() {
            if i == self.in_idx {
                continue;
            }
            let node = &g.nodes()[i];
            let ins = g.inputs_of(i);
            let mut out = std::mem::take(&mut self.frames[i]);
            match self.layers[i].as_mut() {
                Some(Layer::SignGd(states)) => {
                    let mut fired = 0u64;
                    let mut currents = [0.0; 2];
                    for (k, st) in states.iter_mut().enumerate() {
                        for (j, &src) in ins.iter().enumerate() {
                            currents[j] = self.frames[src][k];
                        }
                        let s = st.step(&currents[..ins.len()]);
                        out[k] = s;
                        fired += s as u64;
                    }
                    self.spikes[i] += fired;
                }
                Some(Layer::Subgrad { states, decoders }) => {
                    let mut fired = 0u64;
                    let src = &self.frames[ins[0]];
                    for (k, (st, dec)) in states.iter_mut().zip(decoders.iter_mut()).enumerate() {
                        let s = subgrad_neuron_step(st, src[k]);
                        dec.step(s);
                        out[k] = s;
                        fired += s as u64;
                    }
                    self.spikes[i] += fired;
                }
                None => {
                    let srcs: Vec<&[f64]> = ins.iter().map(|&j| self.frames[j].as_slice()).collect();
                    let shapes: Vec<&[usize]> = ins.iter().map(|&j| g.nodes()[j].shape.as_slice()).collect();
                    eval_op(&node.op, &srcs, &shapes, &node.shape, &mut out);
                }
            }
            self.frames[i] = out;
        }
        let current = &self.frames[self.out_idx];
        match self.snn.family {
            Family::SignGd => {
                let eta = self.snn.schedule.eta(t);
                let (w, b) = (&self.snn.readout_w.data, &self.snn.readout_b.data);
                for (k, r) in self.readout.iter_mut().enumerate() {
                    *r -= eta * (2.0 * (current[k] - b[k]) - w[k]);
                }
            }
            Family::Subgrad => {
                let tf = t as f64;
                for (r, &c) in self.readout.iter_mut().zip(current) {
                    *r = *r * (tf - 1.0) / tf + c / tf;
                }
            }
        }
        self.t = t;
    }

    /// Resets with input `x`, steps `T` times and returns `r(1..=T)`.
    pub fn run(&mut self, x: &Tensor, steps: usize, encoding: InputEncoding) -> Result<Vec<Vec<f64>>> {
        self.set_input(x, encoding)?;
        Ok((0..steps).map(|_| self.step().to_vec()).collect())
    }

    /// Like [`run`](Self::run) but keeps only the snapshots at `checkpoints`
    /// (sorted, deduplicated, clipped to `steps`).
    pub fn run_checkpoints(
        &mut self,
        x: &Tensor,
        steps: usize,
        encoding: InputEncoding,
        checkpoints: &[u64],
    ) -> Result<Vec<(u64, Vec<f64>)>> {
        self.set_input(x, encoding)?;
        let mut cps: Vec<u64> = checkpoints.iter().copied().filter(|&c| c >= 1 && c <= steps as u64).collect();
        cps.sort_unstable();
        cps.dedup();
        let mut out = Vec::with_capacity(cps.len());
        let mut next = cps.iter().peekable();
        for _ in 0..steps {
            self.step();
            if next.peek() == Some(&&self.t) {
                out.push((self.t, self.readout.clone()));
                next.next();
            }
        }
        Ok(out)
    }

    /// Decoded activation of a spiking layer after the last step.
    pub fn decoded(&self, node: usize) -> Option<Vec<f64>> {
        match self.layers.get(node)?.as_ref()? {
            Layer::SignGd(states) => Some(states.iter().map(|s| s.output()).collect()),
            Layer::Subgrad { decoders, .. } => Some(decoders.iter().map(|d| d.y).collect()),
        }
    }

    /// Spike counts per spiking layer, in execution order.
    pub fn layer_spikes(&self) -> Vec<(String, u64)> {
        let g = &self.snn.graph;
        (0..g.nodes().len())
            .filter(|&i| self.layers[i].is_some())
            .map(|i| (g.nodes()[i].id.clone(), self.spikes[i]))
            .collect()
    }

    /// Total spikes emitted by all spiking layers since the last reset.
    pub fn total_spikes(&self) -> u64 {
        self.spikes.iter().sum()
    }

    /// Times any inverse-sqrt neuron fell back on its degenerate branch.
    pub fn degenerate_events(&self) -> u64 {
        self.layers
            .iter()
            .flatten()
            .map(|l| match l {
                Layer::SignGd(states) => states.iter().map(|s| s.degenerate).sum(),
                Layer::Subgrad { .. } => 0,
            })
            .sum()
    }

    /// Neuron kind of the spiking layers, for the energy model. Mixed
    /// sign-gradient mechanisms share one per-SOP cost.
    pub fn neuron_kind(&self) -> NeuronKind {
        match self.snn.family {
            Family::SignGd => NeuronKind::SignGd { mech: FiringMechanism::Relu },
            Family::Subgrad => NeuronKind::Subgrad,
        }
    }
}

/// Error norm used by probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorNorm {
    MaxAbs,
    L2,
}

impl ErrorNorm {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let it = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            ErrorNorm::MaxAbs => it.fold(0.0, f64::max),
            ErrorNorm::L2 => it.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

impl FromStr for ErrorNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "maxabs" | "max-abs" => Ok(ErrorNorm::MaxAbs),
            "l2" => Ok(ErrorNorm::L2),
            _ => Err(Error::Domain(format!("unknown norm `{s}` (expected max or l2)"))),
        }
    }
}

/// Layer name used for the readout in probe records.
pub const READOUT_LAYER: &str = "readout";

/// One probe sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEntry {
    pub layer: String,
    pub t: u64,
    pub decoded: Vec<f64>,
    pub ann: Vec<f64>,
    pub err: f64,
}

/// Probe log: samples in increasing `t`, then per-layer spike counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceRecord {
    pub entries: Vec<ProbeEntry>,
    pub spikes: Vec<(String, u64)>,
}

impl TraceRecord {
    /// Error of `layer` at step `t`, if sampled.
    pub fn err(&self, layer: &str, t: u64) -> Option<f64> {
        self.entries.iter().find(|e| e.layer == layer && e.t == t).map(|e| e.err)
    }
}

/// Runs `inst` on `x` for `steps` steps and, at every checkpoint, compares
/// each spiking layer's decoded output and the readout with the activation of
/// the same node id in `g`. Layers without a counterpart in `g` are skipped.
pub fn probe(
    inst: &mut SnnInstance<'_>,
    g: &ModelGraph,
    x: &Tensor,
    steps: usize,
    encoding: InputEncoding,
    checkpoints: &[u64],
    norm: ErrorNorm,
) -> Result<TraceRecord> {
    let acts = ann_forward(g, x)?;
    let snn_nodes = inst.graph().graph.nodes();
    let pairs: Vec<(usize, String, usize)> = (0..snn_nodes.len())
        .filter(|&i| matches!(snn_nodes[i].op, Op::Neuron { .. }))
        .filter_map(|i| g.position(&snn_nodes[i].id).map(|j| (i, snn_nodes[i].id.clone(), j)))
        .collect();
    let ann_out = acts[g.output_index()].clone();
    let mut cps: Vec<u64> = checkpoints.iter().copied().filter(|&c| c >= 1 && c <= steps as u64).collect();
    cps.sort_unstable();
    cps.dedup();
    inst.set_input(x, encoding)?;
    let mut rec = TraceRecord::default();
    let mut next = cps.iter().peekable();
    for _ in 0..steps {
        inst.step();
        if next.peek() != Some(&&inst.t()) {
            continue;
        }
        next.next();
        for (i, id, j) in &pairs {
            let dec = inst.decoded(*i).expect("spiking layer");
            let err = norm.eval(&dec, &acts[*j]);
            rec.entries.push(ProbeEntry { layer: id.clone(), t: inst.t(), decoded: dec, ann: acts[*j].clone(), err });
        }
        let r = inst.readout().to_vec();
        let err = norm.eval(&r, &ann_out);
        rec.entries.push(ProbeEntry { layer: READOUT_LAYER.into(), t: inst.t(), decoded: r, ann: ann_out.clone(), err });
    }
    rec.spikes = inst.layer_spikes();
    Ok(rec)
}

/// Per-operation energy constants in picojoules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    /// Accumulate-only SOP (IF, LIF, rate-family neurons).
    pub e_sop_ac_pj: f64,
    /// Sign-gradient neuron SOP.
    pub e_sop_signgd_pj: f64,
    /// Multiply-accumulate of the ANN.
    pub e_mac_pj: f64,
}

pub const ENERGY_MODEL: EnergyModel = EnergyModel { e_sop_ac_pj: 0.9, e_sop_signgd_pj: 1.8, e_mac_pj: 4.6 };

impl EnergyModel {
    pub fn e_sop_pj(&self, kind: NeuronKind) -> f64 {
        match kind {
            NeuronKind::If | NeuronKind::Lif | NeuronKind::Subgrad => self.e_sop_ac_pj,
            NeuronKind::SignGd { .. } => self.e_sop_signgd_pj,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub neurons: usize,
    pub timesteps: u64,
    pub spikes: u64,
    /// `spikes / (timesteps * neurons)`.
    pub firing_rate: f64,
    /// Synaptic operations, one per spike.
    pub n_sop: u64,
    pub energy_pj: f64,
}

impl EnergyReport {
    pub fn energy_joules(&self) -> f64 {
        self.energy_pj * 1e-12
    }
}

/// `E = N_SOP * E_SOP(kind)` with `N_SOP` the spike count.
pub fn energy_from_counts(spikes: u64, neurons: usize, timesteps: u64, kind: NeuronKind) -> EnergyReport {
    let denom = timesteps as f64 * neurons as f64;
    EnergyReport {
        neurons,
        timesteps,
        spikes,
        firing_rate: if denom > 0.0 { spikes as f64 / denom } else { 0.0 },
        n_sop: spikes,
        energy_pj: spikes as f64 * ENERGY_MODEL.e_sop_pj(kind),
    }
}

/// Energy of a completed run.
pub fn estimate_energy(inst: &SnnInstance<'_>, kind: NeuronKind) -> EnergyReport {
    energy_from_counts(inst.total_spikes(), inst.graph().neuron_count(), inst.t(), kind)
}

/// ANN energy for `macs` multiply-accumulates.
pub fn ann_energy_pj(macs: u64) -> f64 {
    macs as f64 * ENERGY_MODEL.e_mac_pj
}
