//! Paired neuron/oracle runs on the same input trains.
//!
//! Each replay drives one neuron and, in lockstep, the optimizer iteration it
//! is claimed to execute, then reports the largest gap between the neuron's
//! decoded (and transformed) output and the optimizer iterate.
//!
//! A decision margin within [`TIE_BAND`] of zero is an exact tie in real
//! arithmetic. Either branch is a valid subgradient there and rounding picks
//! one, so the oracle follows the neuron's choice and counts the event.

use crate::codec::{heaviside, Decoder, Scheme};
use crate::neurons::{
    if_step, lif_step, subgrad_neuron_step, FiringMechanism, IfLifParams, IfLifState, SignGdNeuronState,
    SubgradNeuronState,
};
use crate::oracles::{if_transform, lif_transform, reference_nonlinearity, Target};
use crate::schedules::{SignGdCoefficients, SubgradCoefficients};
use crate::{Error, Result};

pub const TIE_BAND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReplayReport {
    pub steps: usize,
    /// Largest `|neuron - oracle|` over `t = 0..=T`.
    pub max_dev: f64,
    /// Steps where the spike and the oracle's branch differ outside the tie band.
    pub disagreements: usize,
    /// Ties where the oracle followed the neuron against `H(0) = 1`.
    pub ties: usize,
}

impl ReplayReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.disagreements == 0 && self.max_dev <= tol
    }
}

/// Branch of the oracle at margin `m` given the neuron's spike `s`.
fn branch(m: f64, s: f64, scale: f64, rep: &mut ReplayReport) -> f64 {
    let h = heaviside(m);
    if m.abs() <= TIE_BAND * scale {
        rep.ties += usize::from(s != h);
        s
    } else {
        rep.disagreements += usize::from(s != h);
        h
    }
}

/// IF neuron against the IF-objective subgradient method with step `1/(t+1)`
/// on the rate-decoded input.
pub fn replay_if(p: &IfLifParams, currents: &[f64]) -> ReplayReport {
    let mut st = IfLifState::new(p);
    let (mut ys, mut xs) = (Decoder::new(Scheme::Rate), Decoder::new(Scheme::Rate));
    let mut f = (p.theta - p.u0) / p.theta;
    let mut rep = ReplayReport { steps: currents.len(), max_dev: (if_transform(0.0, 0, p.u0, p.theta) - f).abs(), ..Default::default() };
    for (k, &i) in currents.iter().enumerate() {
        let t = k as u64 + 1;
        let s = if_step(&mut st, i, p);
        let y = ys.step(s);
        let x = xs.step(i);
        let h = branch(p.r * x / p.theta - f, s, 1.0, &mut rep);
        f -= (f - h) / (t as f64 + 1.0);
        rep.max_dev = rep.max_dev.max((if_transform(y, t, p.u0, p.theta) - f).abs());
    }
    rep
}

/// LIF neuron against the LIF-objective subgradient method with step `1/tau`
/// on the EMA-decoded input.
pub fn replay_lif(p: &IfLifParams, currents: &[f64]) -> ReplayReport {
    let tau = p.tau;
    let mut st = IfLifState::new(p);
    let (mut ys, mut xs) = (Decoder::new(Scheme::Ema { tau }), Decoder::new(Scheme::Ema { tau }));
    let mut f = lif_transform(0.0, 0, p.u0, p.u_rest, p.theta, tau);
    let rest = p.u_rest / (p.theta * (tau - 1.0));
    let mut rep = ReplayReport { steps: currents.len(), ..Default::default() };
    for (k, &i) in currents.iter().enumerate() {
        let t = k as u64 + 1;
        let s = lif_step(&mut st, i, p);
        let y = ys.step(s);
        let x = xs.step(i);
        let shift = p.r * x / (p.theta * (tau - 1.0)) - 1.0 / (tau - 1.0);
        let h = branch(shift - f, s, 1.0, &mut rep);
        f -= (f + rest - h) / tau;
        rep.max_dev = rep.max_dev.max((lif_transform(y, t, p.u0, p.u_rest, p.theta, tau) - f).abs());
    }
    rep
}

/// Subgradient neuron against the IF-objective subgradient method with step
/// `eta(t)` on the input estimate `x~(t) / (1 - eta(t))`, where both the
/// output and the input are decoded with the smoothed scheme.
pub fn replay_subgrad(coeffs: SubgradCoefficients, u_pre0: f64, currents: &[f64]) -> ReplayReport {
    let sched = coeffs.schedule;
    let mut st = SubgradNeuronState::new(coeffs, u_pre0);
    let (mut ys, mut xs) = (Decoder::new(Scheme::Smoothed(sched)), Decoder::new(Scheme::Smoothed(sched)));
    let mut f = 0.0;
    let mut rep = ReplayReport { steps: currents.len(), ..Default::default() };
    for (k, &i) in currents.iter().enumerate() {
        let eta = sched.eta(k as u64 + 1);
        let s = subgrad_neuron_step(&mut st, i);
        let y = ys.step(s);
        let x = xs.step(i);
        let h = branch(x / (1.0 - eta) - f, s, x.abs().max(1.0), &mut rep);
        f -= eta * (f - h);
        rep.max_dev = rep.max_dev.max((y - f).abs());
    }
    rep
}

/// Sign-gradient neuron with unit weights and zero idle current against
/// `f <- f - eta(t) sign(f - target(x(t)))` on the signed-decoded operands.
/// `trains[k]` is the spike train of operand `k`.
pub fn replay_signgd(coeffs: SignGdCoefficients, mech: FiringMechanism, trains: &[Vec<f64>]) -> Result<ReplayReport> {
    let d = mech.arity();
    if trains.len() != d {
        return Err(Error::ArityMismatch { expected: d, got: trains.len() });
    }
    let steps = trains.iter().map(Vec::len).min().unwrap_or(0);
    let mut n = SignGdNeuronState::new(coeffs, mech, &vec![1.0; d], &vec![0.0; d])?;
    let target = Target::from(mech);
    let mut decs: Vec<Decoder> = (0..d).map(|_| Decoder::new(Scheme::Signed(coeffs.schedule))).collect();
    let (mut f, mut x, mut cur) = (0.0, vec![0.0; d], vec![0.0; d]);
    let mut rep = ReplayReport { steps, ..Default::default() };
    for k in 0..steps {
        for j in 0..d {
            cur[j] = trains[j][k];
            x[j] = decs[j].step(cur[j]);
        }
        let s = n.step(&cur);
        // a non-positive variance operand pulls the estimate toward zero
        let (g, scale) = match reference_nonlinearity(target, &x) {
            Ok(v) => (f - v, v.abs().max(1.0)),
            Err(_) => (f, 1.0),
        };
        let h = branch(g, s, scale, &mut rep);
        f -= coeffs.schedule.eta(k as u64 + 1) * (2.0 * h - 1.0);
        rep.max_dev = rep.max_dev.max((n.output() - f).abs());
    }
    Ok(rep)
}
