//! Single-neuron subcommands: `neuron-sweep`, `oracle-check` and `encode`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use sgsnn::codec::{relu1, Decoder, Encoder, Scheme};
use sgsnn::engine::InputEncoding;
use sgsnn::neurons::{
    if_step, lif_step, subgrad_neuron_step, FiringMechanism, IfLifParams, IfLifState, NeuronKind, SignGdNeuronState,
    SubgradNeuronState,
};
use sgsnn::oracles::{reference_nonlinearity, Target};
use sgsnn::replay::{replay_if, replay_lif, replay_signgd, replay_subgrad, ReplayReport};
use sgsnn::schedules::{
    solve_signgd_coefficients, solve_subgrad_coefficients, validate_signgd_coefficients, Parameterization, Schedule,
};

use crate::{checkpoints, csv_writer, parse_encoding, parse_kind, parse_param, parse_schedule};

/// Largest neuron/oracle gap `oracle-check` accepts.
const ORACLE_TOL: f64 = 1e-9;

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Neuron kind: if, lif, subgrad, signgd:<relu|leaky:<d>|gelu|max2|square|misr>.
    #[arg(long, value_parser = parse_kind)]
    neuron: NeuronKind,
    #[arg(long, default_value = "inv:1", value_parser = parse_schedule)]
    schedule: Schedule,
    #[arg(long, default_value = "canonical", value_parser = parse_param)]
    param: Parameterization,
    /// Grid start. For misr the grid runs over the second operand.
    #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
    xmin: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    xmax: f64,
    #[arg(long, default_value_t = 121)]
    points: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// float, det or stoch:<c>[:<seed>].
    #[arg(long, default_value = "det", value_parser = parse_encoding)]
    encoder: InputEncoding,
    /// Fixed first operand of misr.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    x1: f64,
    /// Seed for the max2 companion operand `min(x_max, e - 1)`, `e ~ N(0, 1)`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Membrane constant of lif.
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, value_parser = parse_kind)]
    neuron: NeuronKind,
    #[arg(long, default_value = "inv:1", value_parser = parse_schedule)]
    schedule: Schedule,
    #[arg(long, default_value = "canonical", value_parser = parse_param)]
    param: Parameterization,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    u0: f64,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    u_rest: f64,
    /// Negative control: skews the sign-gradient reset gain by 1% and skips validation.
    #[arg(long)]
    corrupt_coefficients: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long, allow_negative_numbers = true)]
    x: f64,
    #[arg(long, default_value = "inv:1", value_parser = parse_schedule)]
    schedule: Schedule,
    /// float, det, stoch:<c>[:<seed>], const, rate, ema:<tau> or poisson[:<seed>].
    #[arg(long, default_value = "det")]
    encoder: String,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn check_sweep(a: &SweepArgs) -> Result<()> {
    if a.points < 2 {
        bail!("--points must be at least 2, got {}", a.points);
    }
    if a.steps == 0 {
        bail!("--steps must be positive");
    }
    if !(a.xmin <= a.xmax) {
        bail!("--xmin {} exceeds --xmax {}", a.xmin, a.xmax);
    }
    match a.neuron {
        NeuronKind::Lif if !(a.tau > 1.0) => bail!("--tau must exceed 1, got {}", a.tau),
        NeuronKind::Subgrad => {
            solve_subgrad_coefficients(a.schedule)?;
        }
        NeuronKind::SignGd { .. } => {
            solve_signgd_coefficients(a.schedule, a.param)?;
        }
        _ => {}
    }
    Ok(())
}

/// Encoder of operand `k` for a single-neuron run.
fn operand_encoder(kind: NeuronKind, x: f64, k: usize, a: &SweepArgs) -> Encoder {
    match (kind, a.encoder) {
        (NeuronKind::SignGd { .. }, InputEncoding::Float) => Encoder::float(x, a.schedule),
        (NeuronKind::SignGd { .. }, InputEncoding::Deterministic) => Encoder::deterministic(x, a.schedule),
        (NeuronKind::SignGd { .. }, InputEncoding::Stochastic { c, seed }) => {
            Encoder::stochastic(x, a.schedule, c, seed.wrapping_add(k as u64))
        }
        (_, InputEncoding::Float) => Encoder::constant(x),
        (NeuronKind::Lif, InputEncoding::Deterministic) => Encoder::ema_deterministic(x, a.tau),
        (_, InputEncoding::Deterministic) => Encoder::rate_deterministic(x),
        (_, InputEncoding::Stochastic { seed, .. }) => Encoder::poisson(x, seed.wrapping_add(k as u64)),
    }
}

/// `(operands, target)` of one grid point.
fn sweep_point(a: &SweepArgs, g: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, f64)> {
    Ok(match a.neuron {
        NeuronKind::If | NeuronKind::Subgrad => (vec![g], relu1(g)),
        NeuronKind::Lif => (vec![g], relu1((g - 1.0) / (a.tau - 1.0))),
        NeuronKind::SignGd { mech } => {
            let xs = match mech {
                FiringMechanism::Max2 => {
                    let other = g.min(Normal::new(0.0, 1.0)?.sample(rng) - 1.0);
                    vec![g, other]
                }
                FiringMechanism::MulInvSqrt => vec![a.x1, g],
                _ => vec![g],
            };
            let t = reference_nonlinearity(Target::from(mech), &xs)?;
            (xs, t)
        }
    })
}

/// Decoded output of one neuron at each checkpoint.
fn sweep_run(a: &SweepArgs, xs: &[f64], cps: &[u64]) -> Result<Vec<f64>> {
    let mut encs: Vec<Encoder> = xs.iter().enumerate().map(|(k, &x)| operand_encoder(a.neuron, x, k, a)).collect();
    let mut out = Vec::with_capacity(cps.len());
    let mut next = cps.iter().peekable();
    let mut cur = vec![0.0; xs.len()];
    let mut sample = |t: u64, y: f64, out: &mut Vec<f64>| {
        if next.peek() == Some(&&t) {
            out.push(y);
            next.next();
        }
    };
    match a.neuron {
        NeuronKind::If | NeuronKind::Lif => {
            let lif = a.neuron == NeuronKind::Lif;
            let p = if lif { IfLifParams::lif_neuron(1.0, 1.0, a.tau, 0.0, 0.0) } else { IfLifParams::if_neuron(1.0, 1.0, 0.0) };
            let mut st = IfLifState::new(&p);
            let mut dec = Decoder::new(if lif { Scheme::Ema { tau: a.tau } } else { Scheme::Rate });
            for t in 1..=a.steps as u64 {
                let i = encs[0].next();
                let s = if lif { lif_step(&mut st, i, &p) } else { if_step(&mut st, i, &p) };
                sample(t, dec.step(s), &mut out);
            }
        }
        NeuronKind::Subgrad => {
            let mut st = SubgradNeuronState::new(solve_subgrad_coefficients(a.schedule)?, 0.0);
            let mut dec = Decoder::new(Scheme::Smoothed(a.schedule));
            for t in 1..=a.steps as u64 {
                let s = subgrad_neuron_step(&mut st, encs[0].next());
                sample(t, dec.step(s), &mut out);
            }
        }
        NeuronKind::SignGd { mech } => {
            let c = solve_signgd_coefficients(a.schedule, a.param)?;
            let d = mech.arity();
            let mut n = SignGdNeuronState::new(c, mech, &vec![1.0; d], &vec![0.0; d])?;
            for t in 1..=a.steps as u64 {
                for (v, e) in cur.iter_mut().zip(encs.iter_mut()) {
                    *v = e.next();
                }
                n.step(&cur);
                sample(t, n.output(), &mut out);
            }
        }
    }
    Ok(out)
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    check_sweep(a)?;
    let cps = checkpoints(a.steps, &[]);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let points: Vec<(Vec<f64>, f64)> = (0..a.points)
        .map(|k| a.xmin + (a.xmax - a.xmin) * k as f64 / (a.points - 1) as f64)
        .map(|g| sweep_point(a, g, &mut rng))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = points.par_iter().map(|(xs, _)| sweep_run(a, xs, &cps)).collect::<Result<_>>()?;
    let binary = points.first().is_some_and(|(xs, _)| xs.len() == 2);
    let mut w = csv_writer(a.out.as_deref())?;
    if binary {
        w.write_record(["x1", "x2", "t", "err"])?;
    } else {
        w.write_record(["x", "t", "err"])?;
    }
    for ((xs, target), ys) in points.iter().zip(&rows) {
        for (t, y) in cps.iter().zip(ys) {
            let err = (y - target).abs().to_string();
            if binary {
                w.write_record([xs[0].to_string(), xs[1].to_string(), t.to_string(), err])?;
            } else {
                w.write_record([xs[0].to_string(), t.to_string(), err])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn bernoulli_train(rng: &mut ChaCha8Rng, p: f64, steps: usize) -> Vec<f64> {
    (0..steps).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
}

pub fn oracle_check(a: &OracleArgs) -> Result<ExitCode> {
    if a.steps == 0 {
        bail!("--steps must be positive");
    }
    if a.corrupt_coefficients && !matches!(a.neuron, NeuronKind::SignGd { .. }) {
        bail!("--corrupt-coefficients applies to signgd neurons only");
    }
    if !(a.theta > 0.0 && a.r > 0.0) {
        bail!("--theta and --r must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let rep: ReplayReport = match a.neuron {
        NeuronKind::If => {
            let cur: Vec<f64> = (0..a.steps).map(|_| rng.random_range(-0.2..1.2)).collect();
            replay_if(&IfLifParams::if_neuron(a.theta, a.r, a.u0), &cur)
        }
        NeuronKind::Lif => {
            if !(a.tau > 1.0) {
                bail!("--tau must exceed 1, got {}", a.tau);
            }
            let cur: Vec<f64> = (0..a.steps).map(|_| rng.random_range(-0.5..12.0)).collect();
            replay_lif(&IfLifParams::lif_neuron(a.theta, a.r, a.tau, a.u_rest, a.u0), &cur)
        }
        NeuronKind::Subgrad => {
            let c = solve_subgrad_coefficients(a.schedule)?;
            let cur: Vec<f64> = (0..a.steps).map(|_| rng.random_range(-0.2..1.2)).collect();
            replay_subgrad(c, 0.0, &cur)
        }
        NeuronKind::SignGd { mech } => {
            let mut c = solve_signgd_coefficients(a.schedule, a.param)?;
            if a.corrupt_coefficients {
                c = c.with_beta1_factor(1.01);
            } else if !validate_signgd_coefficients(&c, &a.schedule, a.steps as u64, 1e-12) {
                bail!("coefficients for {} fail validation", a.schedule);
            }
            let trains: Vec<Vec<f64>> = (0..mech.arity())
                .map(|k| {
                    // the variance operand of misr leans positive
                    let p = if k == 1 && mech == FiringMechanism::MulInvSqrt {
                        rng.random_range(0.25..0.45)
                    } else {
                        rng.random_range(0.3..0.7)
                    };
                    bernoulli_train(&mut rng, p, a.steps)
                })
                .collect();
            replay_signgd(c, mech, &trains)?
        }
    };
    let pass = rep.passed(ORACLE_TOL);
    println!(
        "{} {}: steps={} max_dev={:.3e} disagreements={} ties={} tol={:.0e}",
        if pass { "PASS" } else { "FAIL" },
        a.neuron,
        rep.steps,
        rep.max_dev,
        rep.disagreements,
        rep.ties,
        ORACLE_TOL
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn parse_seed(s: Option<&str>) -> Result<u64> {
    Ok(match s {
        Some(v) => v.parse()?,
        None => 0,
    })
}

fn build_encoder(spec: &str, x: f64, schedule: Schedule) -> Result<Encoder> {
    let mut parts = spec.splitn(2, ':');
    let head = parts.next().unwrap_or_default();
    let rest = parts.next();
    Ok(match head {
        "const" => Encoder::constant(x),
        "rate" => Encoder::rate_deterministic(x),
        "ema" => {
            let tau: f64 = rest.ok_or_else(|| anyhow::anyhow!("ema needs a base, e.g. ema:10"))?.parse()?;
            if !(tau > 1.0) {
                bail!("ema base must exceed 1, got {tau}");
            }
            Encoder::ema_deterministic(x, tau)
        }
        "poisson" => Encoder::poisson(x, parse_seed(rest)?),
        _ => match parse_encoding(spec).map_err(anyhow::Error::msg)? {
            InputEncoding::Float => Encoder::float(x, schedule),
            InputEncoding::Deterministic => Encoder::deterministic(x, schedule),
            InputEncoding::Stochastic { c, seed } => Encoder::stochastic(x, schedule, c, seed),
        },
    })
}

pub fn encode(a: &EncodeArgs) -> Result<()> {
    let mut e = build_encoder(&a.encoder, a.x, a.schedule)?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["t", "s"])?;
    for t in 1..=a.steps {
        w.write_record([t.to_string(), e.next().to_string()])?;
    }
    w.flush()?;
    Ok(())
}
