//! `sgsnn`: neuron sweeps, oracle checks, conversion, inference, probing and
//! energy reports for sign-gradient spiking networks.

mod graph_cmds;
mod neuron_cmds;

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use sgsnn::engine::{ErrorNorm, InputEncoding};
use sgsnn::graph::Family;
use sgsnn::neurons::NeuronKind;
use sgsnn::schedules::{Parameterization, Schedule};

#[derive(Debug, Parser)]
#[command(name = "sgsnn", version, about = "Spiking neurons as first-order optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one neuron per grid point and report `|output - target|` at log-spaced steps.
    NeuronSweep(neuron_cmds::SweepArgs),
    /// Replay a neuron against the optimizer it implements; exit 0 iff they agree.
    OracleCheck(neuron_cmds::OracleArgs),
    /// Emit the train an encoder produces for one value.
    Encode(neuron_cmds::EncodeArgs),
    /// Write a seeded random-weight model, optionally with inputs and argmax labels.
    SynthModel(graph_cmds::SynthArgs),
    /// Convert an ANN model file into a spiking model file.
    Convert(graph_cmds::ConvertArgs),
    /// Accuracy of a spiking model against labels at step checkpoints.
    Infer(graph_cmds::InferArgs),
    /// Per-layer error between a spiking model and its ANN at step checkpoints.
    Probe(graph_cmds::ProbeArgs),
    /// Spike counts and energy per input.
    Energy(graph_cmds::EnergyArgs),
}

/// Value parsers shared by the subcommands.
pub(crate) fn parse_schedule(s: &str) -> Result<Schedule, String> {
    s.parse().map_err(|e: sgsnn::Error| e.to_string())
}

pub(crate) fn parse_param(s: &str) -> Result<Parameterization, String> {
    s.parse().map_err(|e: sgsnn::Error| e.to_string())
}

pub(crate) fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: sgsnn::Error| e.to_string())
}

pub(crate) fn parse_kind(s: &str) -> Result<NeuronKind, String> {
    s.parse().map_err(|e: sgsnn::Error| e.to_string())
}

pub(crate) fn parse_encoding(s: &str) -> Result<InputEncoding, String> {
    s.parse().map_err(|e: sgsnn::Error| e.to_string())
}

pub(crate) fn parse_norm(s: &str) -> Result<ErrorNorm, String> {
    s.parse().map_err(|e: sgsnn::Error| e.to_string())
}

/// CSV writer on `path`, or on stdout when absent. Rows end in LF.
pub(crate) fn csv_writer(path: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink))
}

/// Powers of two up to `steps`, the extra checkpoints, and `steps` itself.
pub(crate) fn checkpoints(steps: usize, extra: &[u64]) -> Vec<u64> {
    let mut cps: Vec<u64> = std::iter::successors(Some(1u64), |c| c.checked_mul(2))
        .take_while(|&c| c <= steps as u64)
        .chain(extra.iter().copied().filter(|&c| c >= 1 && c <= steps as u64))
        .chain([steps as u64])
        .collect();
    cps.sort_unstable();
    cps.dedup();
    cps
}

/// Caps the global rayon pool at `SNN_THREADS` (0 or unset = one per core).
fn init_threads() -> Result<()> {
    let n = match std::env::var("SNN_THREADS") {
        Ok(v) => v.trim().parse::<usize>().with_context(|| format!("SNN_THREADS must be a thread count, got `{v}`"))?,
        Err(_) => 0,
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}


fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::NeuronSweep(a) => neuron_cmds::sweep(&a).map(|_| ExitCode::SUCCESS),
        Command::OracleCheck(a) => neuron_cmds::oracle_check(&a),
        Command::Encode(a) => neuron_cmds::encode(&a).map(|_| ExitCode::SUCCESS),
        Command::SynthModel(a) => graph_cmds::synth(&a).map(|_| ExitCode::SUCCESS),
        Command::Convert(a) => graph_cmds::convert_cmd(&a).map(|_| ExitCode::SUCCESS),
        Command::Infer(a) => graph_cmds::infer(&a).map(|_| ExitCode::SUCCESS),
        Command::Probe(a) => graph_cmds::probe_cmd(&a).map(|_| ExitCode::SUCCESS),
        Command::Energy(a) => graph_cmds::energy(&a).map(|_| ExitCode::SUCCESS),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_grid() {
        assert_eq!(checkpoints(20, &[3, 50]), vec![1, 2, 3, 4, 8, 16, 20]);
        assert_eq!(checkpoints(1, &[]), vec![1]);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
