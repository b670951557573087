//! Network subcommands: `synth-model`, `convert`, `infer`, `probe` and `energy`.

use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;

use sgsnn::engine::{estimate_energy, probe, ErrorNorm, InputEncoding, SnnInstance};
use sgsnn::graph::zoo::{random_cnn, random_conv_bn, random_inputs, random_layernorm_block, random_mlp};
use sgsnn::graph::{
    convert, load_labels, load_model, load_snn, load_tensor_file, normalize_relu, op_census, prepare, save_labels,
    save_model, save_snn, save_tensor_file, Family, ModelGraph, SnnGraph, Tensor,
};
use sgsnn::schedules::{Parameterization, Schedule};

use crate::{checkpoints, csv_writer, parse_encoding, parse_family, parse_norm, parse_param, parse_schedule};

/// Checkpoints `infer` and `probe` always report besides the powers of two.
const DEFAULT_CHECKPOINTS: [u64; 5] = [16, 32, 64, 128, 256];

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arch {
    /// Dense ReLU stack over `--dims`.
    Mlp,
    /// 1x8x8 input, conv, ReLU, 2x2 max pool, dense.
    Cnn,
    /// Dense, layer norm, GELU, dense over a `--dims` wide vector.
    Layernorm,
    /// Cx6x6 input, conv, batchnorm, ReLU, dense.
    ConvBn,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    arch: Arch,
    /// Comma-separated widths: the layer widths of mlp, the vector width of
    /// layernorm, the channel count of conv-bn. Ignored by cnn.
    #[arg(long, value_delimiter = ',', default_value = "16,32,10")]
    dims: Vec<usize>,
    /// Output classes of cnn, layernorm and conv-bn.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write `--items` standard normal inputs here.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the model's argmax predictions on `--data` here.
    #[arg(long, requires = "data")]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    items: usize,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "signgd", value_parser = parse_family)]
    family: Family,
    #[arg(long, default_value = "inv:1", value_parser = parse_schedule)]
    schedule: Schedule,
    #[arg(long, default_value = "canonical", value_parser = parse_param)]
    param: Parameterization,
    /// Rescale ReLU layers on the first N samples of `--calib`.
    #[arg(long, requires = "calib")]
    normalize_relu: Option<usize>,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the prepared (and normalized) ANN the spiking model mirrors.
    #[arg(long)]
    ann_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    snn: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 256)]
    steps: usize,
    /// float, det or stoch:<c>[:<seed>].
    #[arg(long, default_value = "det", value_parser = parse_encoding)]
    encoding: InputEncoding,
    /// Extra checkpoints, comma-separated.
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the readout of `--trace-item` at every step here.
    #[arg(long)]
    dense_trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    trace_item: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    snn: PathBuf,
    /// ANN the spiking model was converted from; prepared before comparison.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    item: usize,
    #[arg(long, default_value_t = 256)]
    steps: usize,
    #[arg(long, default_value = "det", value_parser = parse_encoding)]
    encoding: InputEncoding,
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<u64>,
    /// max or l2.
    #[arg(long, default_value = "max", value_parser = parse_norm)]
    norm: ErrorNorm,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[arg(long)]
    snn: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 256)]
    steps: usize,
    #[arg(long, default_value = "det", value_parser = parse_encoding)]
    encoding: InputEncoding,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Splits a `[N, ...]` dataset into `N` samples of `sample_shape`.
fn split_items(data: &Tensor, sample_shape: &[usize]) -> Result<Vec<Tensor>> {
    ensure!(
        data.shape.len() == sample_shape.len() + 1 && data.shape[1..] == *sample_shape,
        "data has shape {:?}, expected [N, {}]",
        data.shape,
        sample_shape.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
    );
    let n = data.shape[0];
    let per: usize = sample_shape.iter().product();
    (0..n)
        .map(|k| Ok(Tensor::new(sample_shape.to_vec(), data.data[k * per..(k + 1) * per].to_vec())?))
        .collect()
}

fn stack_items(items: &[Tensor], sample_shape: &[usize]) -> Result<Tensor> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(sample_shape);
    Ok(Tensor::new(shape, items.iter().flat_map(|t| t.data.iter().copied()).collect())?)
}

/// Index of the largest entry; the first one wins ties.
fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (k, &x)| if x > v[best] { k } else { best })
}

fn load_items(snn: &SnnGraph, path: &std::path::Path) -> Result<Vec<Tensor>> {
    let data = load_tensor_file(path).with_context(|| format!("reading {}", path.display()))?;
    split_items(&data, snn.graph.input_shape())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let width = |k: usize| a.dims.get(k).copied().with_context(|| format!("--dims needs at least {} entries", k + 1));
    let g = match a.arch {
        Arch::Mlp => random_mlp(&a.dims, a.seed)?,
        Arch::Cnn => random_cnn(a.classes, a.seed)?,
        Arch::Layernorm => random_layernorm_block(width(0)?, a.classes, a.seed)?,
        Arch::ConvBn => random_conv_bn(width(0)?, a.classes, a.seed)?,
    };
    save_model(&g, &a.out)?;
    if let Some(dp) = &a.data {
        let shape = g.input_shape().to_vec();
        let items = random_inputs(&shape, a.items, a.seed.wrapping_add(1));
        save_tensor_file(&stack_items(&items, &shape)?, dp)?;
        if let Some(lp) = &a.labels {
            let labels: Vec<u32> =
                items.iter().map(|x| Ok(argmax(&g.predict(x)?) as u32)).collect::<Result<_>>()?;
            save_labels(&labels, lp)?;
        }
    }
    eprintln!("wrote {} ({} nodes)", a.out.display(), g.nodes().len());
    Ok(())
}

fn print_census(label: &str, g: &ModelGraph) {
    let mut census: Vec<(&str, usize)> = op_census(g).into_iter().collect();
    census.sort_unstable();
    let line: Vec<String> = census.iter().map(|(op, n)| format!("{op}={n}")).collect();
    eprintln!("{label}: {}", line.join(" "));
}

pub fn convert_cmd(a: &ConvertArgs) -> Result<()> {
    let g = load_model(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    print_census("ann", &g);
    let mut prepared = prepare(&g)?;
    if let (Some(n), Some(cp)) = (a.normalize_relu, &a.calib) {
        let data = load_tensor_file(cp).with_context(|| format!("reading {}", cp.display()))?;
        let items = split_items(&data, prepared.input_shape())?;
        ensure!(n >= 1 && n <= items.len(), "--normalize-relu {n} outside 1..={}", items.len());
        let (normed, rep) = normalize_relu(&prepared, &items[..n])?;
        for (id, m) in &rep.scaled {
            eprintln!("normalized {id}: max {m:.6}");
        }
        for id in &rep.skipped {
            eprintln!("skipped {id}: never active on the calibration set");
        }
        prepared = normed;
    }
    print_census("prepared", &prepared);
    let snn = convert(&prepared, a.family, a.schedule, a.param)
        .with_context(|| format!("converting {} to the {} family", a.model.display(), a.family))?;
    save_snn(&snn, &a.out)?;
    if let Some(p) = &a.ann_out {
        save_model(&prepared, p)?;
    }
    eprintln!("wrote {} ({} spiking layers, {} neurons)", a.out.display(), snn.neuron_ids().len(), snn.neuron_count());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    ensure!(a.steps > 0, "--steps must be positive");
    let snn = load_snn(&a.snn).with_context(|| format!("reading {}", a.snn.display()))?;
    let items = load_items(&snn, &a.data)?;
    let labels = load_labels(&a.labels).with_context(|| format!("reading {}", a.labels.display()))?;
    if labels.len() != items.len() {
        bail!("{} labels for {} inputs", labels.len(), items.len());
    }
    let mut extra = DEFAULT_CHECKPOINTS.to_vec();
    extra.extend_from_slice(&a.checkpoints);
    let cps = checkpoints(a.steps, &extra);
    let hits: Vec<Vec<bool>> = items
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &l)| {
            let mut inst = SnnInstance::new(&snn)?;
            let snaps = inst.run_checkpoints(x, a.steps, a.encoding, &cps)?;
            Ok(snaps.iter().map(|(_, r)| argmax(r) == l as usize).collect())
        })
        .collect::<Result<_>>()?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["T", "acc"])?;
    for (k, t) in cps.iter().enumerate() {
        let n = hits.iter().filter(|h| h[k]).count();
        let acc = if hits.is_empty() { 0.0 } else { n as f64 / hits.len() as f64 };
        w.write_record([t.to_string(), acc.to_string()])?;
    }
    w.flush()?;
    if let Some(p) = &a.dense_trace {
        let x = items.get(a.trace_item).with_context(|| format!("--trace-item {} of {}", a.trace_item, items.len()))?;
        let mut inst = SnnInstance::new(&snn)?;
        let rows = inst.run(x, a.steps, a.encoding)?;
        let mut tw = csv_writer(Some(p))?;
        let classes = rows.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string(), "class".to_string()];
        header.extend((0..classes).map(|c| format!("logit{c}")));
        tw.write_record(&header)?;
        for (k, r) in rows.iter().enumerate() {
            let mut rec = vec![(k + 1).to_string(), argmax(r).to_string()];
            rec.extend(r.iter().map(ToString::to_string));
            tw.write_record(&rec)?;
        }
        tw.flush()?;
    }
    Ok(())
}

pub fn probe_cmd(a: &ProbeArgs) -> Result<()> {
    ensure!(a.steps > 0, "--steps must be positive");
    let snn = load_snn(&a.snn).with_context(|| format!("reading {}", a.snn.display()))?;
    let ann = prepare(&load_model(&a.model).with_context(|| format!("reading {}", a.model.display()))?)?;
    let items = load_items(&snn, &a.data)?;
    let x = items.get(a.item).with_context(|| format!("--item {} of {}", a.item, items.len()))?;
    let mut extra = DEFAULT_CHECKPOINTS.to_vec();
    extra.extend_from_slice(&a.checkpoints);
    let cps = checkpoints(a.steps, &extra);
    let mut inst = SnnInstance::new(&snn)?;
    let rec = probe(&mut inst, &ann, x, a.steps, a.encoding, &cps, a.norm)?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["layer", "t", "err"])?;
    for e in &rec.entries {
        w.write_record([e.layer.clone(), e.t.to_string(), e.err.to_string()])?;
    }
    w.flush()?;
    for (layer, n) in &rec.spikes {
        eprintln!("{layer}: {n} spikes");
    }
    Ok(())
}

pub fn energy(a: &EnergyArgs) -> Result<()> {
    ensure!(a.steps > 0, "--steps must be positive");
    let snn = load_snn(&a.snn).with_context(|| format!("reading {}", a.snn.display()))?;
    let items = load_items(&snn, &a.data)?;
    let reports = items
        .par_iter()
        .map(|x| {
            let mut inst = SnnInstance::new(&snn)?;
            inst.run_checkpoints(x, a.steps, a.encoding, &[])?;
            Ok(estimate_energy(&inst, inst.neuron_kind()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["item", "neurons", "spikes", "fr", "n_sop", "energy_pj"])?;
    for (k, r) in reports.iter().enumerate() {
        w.write_record([
            k.to_string(),
            r.neurons.to_string(),
            r.spikes.to_string(),
            r.firing_rate.to_string(),
            r.n_sop.to_string(),
            r.energy_pj.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
