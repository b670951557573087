//! On-disk formats.
//!
//! A model is a JSON manifest plus a binary blob next to it. The blob starts
//! with the magic `SGM1` followed by little-endian f32 tensor payloads; the
//! manifest lists every tensor with its byte offset into the blob and its
//! element count. Datasets use two small binary files: `STEN` tensors
//! (`u32` rank, `u32` dims, f32 payload) and `SLBL` labels (`u32` count,
//! `u32` labels).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Family, ModelGraph, Node, Op, SnnGraph, Tensor};
use crate::error::{Error, Result};
use crate::schedules::{Parameterization, Schedule};

const MODEL_MAGIC: &[u8; 4] = b"SGM1";
const TENSOR_MAGIC: &[u8; 4] = b"STEN";
const LABEL_MAGIC: &[u8; 4] = b"SLBL";
const READOUT: &str = "__readout";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    /// Blob file name, relative to the manifest.
    blob: String,
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    edges: Vec<(String, String)>,
    tensors: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snn: Option<SnnRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: String,
    op: String,
    #[serde(default)]
    inputs: Vec<String>,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob, magic included.
    offset: usize,
    /// Number of f32 elements.
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnnRecord {
    family: Family,
    schedule: Schedule,
    param: Parameterization,
}

struct BlobWriter {
    bytes: Vec<u8>,
    records: Vec<TensorRecord>,
}

impl BlobWriter {
    fn new() -> Self {
        BlobWriter { bytes: MODEL_MAGIC.to_vec(), records: Vec::new() }
    }

    fn put(&mut self, name: String, t: &Tensor) -> String {
        let offset = self.bytes.len();
        for &v in &t.data {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.records.push(TensorRecord { name: name.clone(), shape: t.shape.clone(), offset, length: t.len() });
        name
    }
}

fn node_record(n: &Node, blob: &mut BlobWriter) -> NodeRecord {
    let mut attrs = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    let mut put = |role: &str, t: &Tensor| {
        tensors.insert(role.to_string(), blob.put(format!("{}.{role}", n.id), t));
    };
    match &n.op {
        Op::Dense { weight, bias } => {
            put("weight", weight);
            put("bias", bias);
        }
        Op::Conv2d { weight, bias, stride, padding } => {
            put("weight", weight);
            put("bias", bias);
            attrs.insert("stride".into(), json!(stride));
            attrs.insert("padding".into(), json!(padding));
        }
        Op::AvgPool2d { kernel, stride, padding } => {
            attrs.insert("kernel".into(), json!(kernel));
            attrs.insert("stride".into(), json!(stride));
            attrs.insert("padding".into(), json!(padding));
        }
        Op::MaxPool2d { kernel, stride } => {
            attrs.insert("kernel".into(), json!(kernel));
            attrs.insert("stride".into(), json!(stride));
        }
        Op::BatchNorm { gamma, beta, mean, var, eps } => {
            put("gamma", gamma);
            put("beta", beta);
            put("mean", mean);
            put("var", var);
            attrs.insert("eps".into(), json!(eps));
        }
        Op::LayerNorm { gamma, beta, eps } => {
            put("gamma", gamma);
            put("beta", beta);
            attrs.insert("eps".into(), json!(eps));
        }
        Op::LeakyRelu { delta } => {
            attrs.insert("delta".into(), json!(delta));
        }
        Op::Transpose { perm } => {
            attrs.insert("perm".into(), json!(perm));
        }
        Op::Gather { slots, index, shape } => {
            attrs.insert("slots".into(), json!(slots));
            attrs.insert("index".into(), json!(index));
            attrs.insert("shape".into(), json!(shape));
        }
        Op::Scale { factor } => {
            attrs.insert("factor".into(), json!(factor));
        }
        Op::Neuron { kind, w, b } => {
            attrs.insert("kind".into(), json!(kind.to_string()));
            for (k, (wk, bk)) in w.iter().zip(b).enumerate() {
                put(&format!("w{k}"), wk);
                put(&format!("b{k}"), bk);
            }
        }
        Op::Input | Op::Output | Op::Relu | Op::Gelu | Op::Add | Op::Flatten | Op::Max2 | Op::Square | Op::MulInvSqrt => {}
    }
    NodeRecord {
        id: n.id.clone(),
        op: n.op.name().to_string(),
        inputs: n.inputs.clone(),
        shape: n.shape.clone(),
        attrs,
        tensors,
        meta: n.meta.clone(),
    }
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write(path: &Path, g: &ModelGraph, snn: Option<&SnnGraph>) -> Result<()> {
    let mut blob = BlobWriter::new();
    let mut nodes: Vec<NodeRecord> = g.nodes().iter().map(|n| node_record(n, &mut blob)).collect();
    let snn_rec = snn.map(|s| {
        let o = g.output_index();
        let rw = blob.put(format!("{READOUT}.w"), &s.readout_w);
        let rb = blob.put(format!("{READOUT}.b"), &s.readout_b);
        nodes[o].tensors.insert("readout_w".into(), rw);
        nodes[o].tensors.insert("readout_b".into(), rb);
        SnnRecord { family: s.family, schedule: s.schedule, param: s.param }
    });
    let bp = blob_path(path);
    if bp == path {
        return Err(Error::Graph(format!("manifest {} would be overwritten by its blob; use a .json name", path.display())));
    }
    let manifest = Manifest {
        format: String::from_utf8_lossy(MODEL_MAGIC).into_owned(),
        blob: bp.file_name().and_then(|s| s.to_str()).unwrap_or("model.bin").to_string(),
        nodes,
        edges: g.edge_list(),
        tensors: blob.records,
        snn: snn_rec,
    };
    fs::write(&bp, &blob.bytes)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `path` (JSON manifest) and `path` with extension `.bin` (blob).
pub fn save_model(g: &ModelGraph, path: &Path) -> Result<()> {
    write(path, g, None)
}

/// Same layout as [`save_model`], plus the neuron family, schedule and
/// readout calibration.
pub fn save_snn(s: &SnnGraph, path: &Path) -> Result<()> {
    write(path, &s.graph, Some(s))
}

struct Loaded {
    graph: ModelGraph,
    snn: Option<SnnRecord>,
    readout: Option<(Tensor, Tensor)>,
}

fn attr<'a>(r: &'a NodeRecord, key: &str) -> Result<&'a Value> {
    r.attrs.get(key).ok_or_else(|| Error::Graph(format!("node `{}` lacks attribute `{key}`", r.id)))
}

fn attr_f64(r: &NodeRecord, key: &str) -> Result<f64> {
    attr(r, key)?.as_f64().ok_or_else(|| Error::Graph(format!("node `{}`: `{key}` is not a number", r.id)))
}

fn attr_vec<T: serde::de::DeserializeOwned>(r: &NodeRecord, key: &str) -> Result<T> {
    serde_json::from_value(attr(r, key)?.clone())
        .map_err(|e| Error::Graph(format!("node `{}`: bad `{key}`: {e}", r.id)))
}

fn read(path: &Path) -> Result<Loaded> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.format.as_bytes() != MODEL_MAGIC {
        return Err(Error::BadMagic { expected: "SGM1".into(), found: manifest.format });
    }
    let bp = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&bp)?;
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: "SGM1".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let mut table: BTreeMap<&str, Tensor> = BTreeMap::new();
    for rec in &manifest.tensors {
        let end = rec.offset + 4 * rec.length;
        if rec.offset < 4 || end > bytes.len() {
            return Err(Error::TruncatedBlob { name: rec.name.clone(), end, len: bytes.len() });
        }
        let data = bytes[rec.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        table.insert(&rec.name, Tensor::new(rec.shape.clone(), data)?);
    }
    let tensor = |r: &NodeRecord, role: &str| -> Result<Tensor> {
        let name = r
            .tensors
            .get(role)
            .ok_or_else(|| Error::Graph(format!("node `{}` lacks tensor `{role}`", r.id)))?;
        table
            .get(name.as_str())
            .cloned()
            .ok_or_else(|| Error::Graph(format!("node `{}` references missing tensor `{name}`", r.id)))
    };
    let mut nodes = Vec::with_capacity(manifest.nodes.len());
    let mut readout = None;
    for r in &manifest.nodes {
        let op = match r.op.as_str() {
            "input" => Op::Input,
            "output" => {
                if r.tensors.contains_key("readout_w") {
                    readout = Some((tensor(r, "readout_w")?, tensor(r, "readout_b")?));
                }
                Op::Output
            }
            "dense" => Op::Dense { weight: tensor(r, "weight")?, bias: tensor(r, "bias")? },
            "conv2d" => Op::Conv2d {
                weight: tensor(r, "weight")?,
                bias: tensor(r, "bias")?,
                stride: attr_vec(r, "stride")?,
                padding: attr_vec(r, "padding")?,
            },
            "avgpool2d" => Op::AvgPool2d {
                kernel: attr_vec(r, "kernel")?,
                stride: attr_vec(r, "stride")?,
                padding: attr_vec(r, "padding")?,
            },
            "maxpool2d" => Op::MaxPool2d { kernel: attr_vec(r, "kernel")?, stride: attr_vec(r, "stride")? },
            "batchnorm" => Op::BatchNorm {
                gamma: tensor(r, "gamma")?,
                beta: tensor(r, "beta")?,
                mean: tensor(r, "mean")?,
                var: tensor(r, "var")?,
                eps: attr_f64(r, "eps")?,
            },
            "layernorm" => {
                Op::LayerNorm { gamma: tensor(r, "gamma")?, beta: tensor(r, "beta")?, eps: attr_f64(r, "eps")? }
            }
            "relu" => Op::Relu,
            "leaky_relu" => Op::LeakyRelu { delta: attr_f64(r, "delta")? },
            "gelu" => Op::Gelu,
            "add" => Op::Add,
            "flatten" => Op::Flatten,
            "transpose" => Op::Transpose { perm: attr_vec(r, "perm")? },
            "gather" => Op::Gather {
                slots: attr_vec(r, "slots")?,
                index: attr_vec(r, "index")?,
                shape: attr_vec(r, "shape")?,
            },
            "scale" => Op::Scale { factor: attr_f64(r, "factor")? },
            "max2" => Op::Max2,
            "square" => Op::Square,
            "mul_inv_sqrt" => Op::MulInvSqrt,
            "neuron" => {
                let kind: crate::neurons::NeuronKind = attr_vec::<String>(r, "kind")?.parse()?;
                let d = match kind {
                    crate::neurons::NeuronKind::SignGd { mech } => mech.arity(),
                    _ => 1,
                };
                let mut w = Vec::with_capacity(d);
                let mut b = Vec::with_capacity(d);
                for k in 0..d {
                    w.push(tensor(r, &format!("w{k}"))?);
                    b.push(tensor(r, &format!("b{k}"))?);
                }
                Op::Neuron { kind, w, b }
            }
            other => return Err(Error::UnknownOp(other.to_string())),
        };
        let mut n = Node::new(r.id.clone(), op, r.inputs.clone());
        n.meta = r.meta.clone();
        if matches!(n.op, Op::Input) {
            n.shape = r.shape.clone();
        }
        nodes.push(n);
    }
    let graph = ModelGraph::new(nodes)?;
    for r in &manifest.nodes {
        let n = graph.node(&r.id).expect("just built");
        if n.shape != r.shape {
            return Err(Error::ShapeMismatch(format!(
                "node `{}` declares shape {:?} but computes {:?}",
                r.id, r.shape, n.shape
            )));
        }
    }
    if !manifest.edges.is_empty() {
        let mut declared = manifest.edges.clone();
        let mut actual = graph.edge_list();
        declared.sort();
        actual.sort();
        if declared != actual {
            return Err(Error::Graph("edge list disagrees with node inputs".into()));
        }
    }
    Ok(Loaded { graph, snn: manifest.snn, readout })
}

/// Loads an ANN graph. Spiking manifests are rejected.
pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let l = read(path)?;
    if l.snn.is_some() {
        return Err(Error::Graph("manifest holds a spiking graph; use load_snn".into()));
    }
    Ok(l.graph)
}

/// Loads a spiking graph written by [`save_snn`].
pub fn load_snn(path: &Path) -> Result<SnnGraph> {
    let l = read(path)?;
    let rec = l.snn.ok_or_else(|| Error::Graph("manifest holds an ANN graph; convert it first".into()))?;
    let (readout_w, readout_b) = l.readout.ok_or_else(|| Error::Graph("spiking manifest lacks readout calibration".into()))?;
    Ok(SnnGraph { graph: l.graph, family: rec.family, schedule: rec.schedule, param: rec.param, readout_w, readout_b })
}

fn take_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let s = bytes.get(*pos..*pos + 4).ok_or_else(|| Error::TruncatedBlob {
        name: what.to_string(),
        end: *pos + 4,
        len: bytes.len(),
    })?;
    *pos += 4;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    Ok(())
}

/// Writes a `STEN` tensor file.
pub fn save_tensor_file(t: &Tensor, path: &Path) -> Result<()> {
    let mut bytes = TENSOR_MAGIC.to_vec();
    bytes.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a `STEN` tensor file. For datasets the first dimension indexes samples.
pub fn load_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, TENSOR_MAGIC)?;
    let mut pos = 4;
    let rank = take_u32(&bytes, &mut pos, "rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(take_u32(&bytes, &mut pos, "dims")? as usize);
    }
    let n: usize = shape.iter().product();
    let end = pos + 4 * n;
    if bytes.len() < end {
        return Err(Error::TruncatedBlob { name: "payload".into(), end, len: bytes.len() });
    }
    let data = bytes[pos..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Tensor::new(shape, data)
}

/// Writes a `SLBL` label file.
pub fn save_labels(labels: &[u32], path: &Path) -> Result<()> {
    let mut bytes = LABEL_MAGIC.to_vec();
    bytes.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a `SLBL` label file.
pub fn load_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, LABEL_MAGIC)?;
    let mut pos = 4;
    let n = take_u32(&bytes, &mut pos, "count")? as usize;
    (0..n).map(|_| take_u32(&bytes, &mut pos, "labels")).collect()
}
