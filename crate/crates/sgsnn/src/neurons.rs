//! Discrete neuron dynamics.
//!
//! - IF and LIF neurons with reset-by-subtraction.
//! - The generalized subgradient neuron (leak `alpha`, input gain `gamma`,
//!   reset `beta`, threshold decaying with the running leak product).
//! - The sign-gradient neuron over two membrane variables: `v` reconstructs the
//!   decoded input, `u` the decoded output, and the spike is the sign of the
//!   objective's gradient in `y`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::heaviside;
use crate::error::{Error, Result};
use crate::schedules::{
    SignGdCoefficientSet, SignGdCoefficients, SubgradCoefficientSet, SubgradCoefficients,
};

/// GELU sigmoid-approximation slope.
pub const GELU_SLOPE: f64 = 1.702;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IfLifParams {
    pub theta: f64,
    pub r: f64,
    /// Membrane time constant, LIF only. Must exceed 1.
    pub tau: f64,
    /// Resting potential, LIF only.
    pub u_rest: f64,
    pub u0: f64,
}

impl IfLifParams {
    pub fn if_neuron(theta: f64, r: f64, u0: f64) -> Self {
        IfLifParams { theta, r, tau: f64::INFINITY, u_rest: 0.0, u0 }
    }

    pub fn lif_neuron(theta: f64, r: f64, tau: f64, u_rest: f64, u0: f64) -> Self {
        assert!(tau > 1.0, "LIF membrane constant must exceed 1, got {tau}");
        IfLifParams { theta, r, tau, u_rest, u0 }
    }
}

/// Membrane state shared by IF and LIF. `u` is the post-firing potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IfLifState {
    pub u: f64,
    pub t: u64,
}

impl IfLifState {
    pub fn new(p: &IfLifParams) -> Self {
        assert!(p.theta > 0.0, "threshold must be positive");
        IfLifState { u: p.u0, t: 0 }
    }
}

#[inline]
fn fire_and_reset(state: &mut IfLifState, u_pre: f64, theta: f64) -> f64 {
    let s = heaviside(u_pre - theta);
    state.u = u_pre - theta * s;
    state.t += 1;
    s
}

/// `u_pre = u + R I`, `s = H(u_pre - theta)`, `u = u_pre - theta s`.
#[inline]
pub fn if_step(state: &mut IfLifState, i: f64, p: &IfLifParams) -> f64 {
    let u_pre = state.u + p.r * i;
    fire_and_reset(state, u_pre, p.theta)
}

/// `u_pre = u - (u - u_rest)/tau + (R/tau) I`, then fire and reset as IF.
#[inline]
pub fn lif_step(state: &mut IfLifState, i: f64, p: &IfLifParams) -> f64 {
    let u_pre = state.u - (state.u - p.u_rest) / p.tau + p.r / p.tau * i;
    fire_and_reset(state, u_pre, p.theta)
}

/// Generalized subgradient neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgradNeuronState {
    pub u: f64,
    pub u_pre0: f64,
    /// Product of `alpha(j)` for `j = 0..t-1`.
    pub alpha_prod: f64,
    pub t: u64,
    pub coeffs: SubgradCoefficients,
}

impl SubgradNeuronState {
    /// No spike is emitted at `t = 0`, so `u(0) = u_pre(0)`.
    pub fn new(coeffs: SubgradCoefficients, u_pre0: f64) -> Self {
        SubgradNeuronState { u: u_pre0, u_pre0, alpha_prod: 1.0, t: 0, coeffs }
    }
}

/// `u_pre(t+1) = alpha(t) u(t) + gamma(t+1) I(t+1)`,
/// `s = H(u_pre(t+1) - u_pre(0) prod_{j<=t} alpha(j))`, `u = u_pre - beta(t+1) s`.
#[inline]
pub fn subgrad_neuron_step(state: &mut SubgradNeuronState, i: f64) -> f64 {
    let t = state.t;
    let a = state.coeffs.alpha(t);
    let u_pre = a * state.u + state.coeffs.gamma(t + 1) * i;
    state.alpha_prod *= a;
    let s = heaviside(u_pre - state.u_pre0 * state.alpha_prod);
    state.u = u_pre - state.coeffs.beta(t + 1) * s;
    state.t = t + 1;
    s
}

/// Firing condition of the sign-gradient neuron.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FiringMechanism {
    Relu,
    LeakyRelu { delta: f64 },
    Gelu,
    Max2,
    Square,
    /// Multiply by inverse square root: target `x1 / sqrt(x2)`.
    MulInvSqrt,
}

impl FiringMechanism {
    pub fn arity(&self) -> usize {
        match self {
            FiringMechanism::Max2 | FiringMechanism::MulInvSqrt => 2,
            _ => 1,
        }
    }

    /// Spike for decoded output estimate `y` and decoded operands `x`.
    ///
    /// Every branch is exclusive so the result is always 0 or 1, including at
    /// ties. Returns `(s, degenerate)`; `degenerate` flags the inverse-sqrt
    /// fallback taken when `x2 <= 0`.
    #[inline]
    pub fn fire(&self, y: f64, x: &[f64]) -> (f64, bool) {
        let s = match *self {
            FiringMechanism::Relu => {
                if x[0] >= 0.0 {
                    heaviside(y - x[0])
                } else {
                    heaviside(y)
                }
            }
            FiringMechanism::LeakyRelu { delta } => {
                if x[0] >= 0.0 {
                    heaviside(y - x[0])
                } else {
                    heaviside(y - delta * x[0])
                }
            }
            FiringMechanism::Gelu => {
                let k = 1.0 + (-GELU_SLOPE * x[0]).exp();
                let d = k * y - x[0];
                if d.is_finite() {
                    heaviside(d)
                } else {
                    // target underflows to 0 for very negative inputs
                    heaviside(y)
                }
            }
            FiringMechanism::Max2 => {
                let sel = if x[0] >= x[1] { x[0] } else { x[1] };
                heaviside(y - sel)
            }
            FiringMechanism::Square => heaviside(y - x[0] * x[0]),
            FiringMechanism::MulInvSqrt => {
                let (x1, x2) = (x[0], x[1]);
                if !(x2 > 0.0) {
                    return (heaviside(y), true);
                }
                if y >= 0.0 {
                    if x1 <= 0.0 {
                        1.0
                    } else {
                        heaviside(x2 * y * y - x1 * x1)
                    }
                } else if x1 > 0.0 {
                    0.0
                } else {
                    heaviside(x1 * x1 - x2 * y * y)
                }
            }
        };
        (s, false)
    }
}

impl fmt::Display for FiringMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FiringMechanism::Relu => write!(f, "relu"),
            FiringMechanism::LeakyRelu { delta } => write!(f, "leaky:{delta}"),
            FiringMechanism::Gelu => write!(f, "gelu"),
            FiringMechanism::Max2 => write!(f, "max2"),
            FiringMechanism::Square => write!(f, "square"),
            FiringMechanism::MulInvSqrt => write!(f, "misr"),
        }
    }
}

impl FromStr for FiringMechanism {
    type Err = Error;
    /// Accepts the mechanism part of a neuron name, e.g. `relu` or `leaky:0.1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["relu"] => Ok(FiringMechanism::Relu),
            ["leaky", d] => d
                .parse::<f64>()
                .map(|delta| FiringMechanism::LeakyRelu { delta })
                .map_err(|_| Error::UnknownMechanism(s.to_string())),
            ["gelu"] => Ok(FiringMechanism::Gelu),
            ["max2"] => Ok(FiringMechanism::Max2),
            ["square"] => Ok(FiringMechanism::Square),
            ["misr"] => Ok(FiringMechanism::MulInvSqrt),
            _ => Err(Error::UnknownMechanism(s.to_string())),
        }
    }
}

/// Stable neuron names: `if`, `lif`, `subgrad`, `signgd:<mechanism>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NeuronKind {
    If,
    Lif,
    Subgrad,
    SignGd { mech: FiringMechanism },
}

impl fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeuronKind::If => write!(f, "if"),
            NeuronKind::Lif => write!(f, "lif"),
            NeuronKind::Subgrad => write!(f, "subgrad"),
            NeuronKind::SignGd { mech } => write!(f, "signgd:{mech}"),
        }
    }
}

impl FromStr for NeuronKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "if" => Ok(NeuronKind::If),
            "lif" => Ok(NeuronKind::Lif),
            "subgrad" => Ok(NeuronKind::Subgrad),
            _ => match s.strip_prefix("signgd:") {
                Some(m) => Ok(NeuronKind::SignGd { mech: m.parse()? }),
                None => Err(Error::UnknownMechanism(s.to_string())),
            },
        }
    }
}

/// Sign-gradient neuron. Operands are stored inline; arity is 1 or 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignGdNeuronState {
    pub u: f64,
    pub v: [f64; 2],
    /// Completed steps.
    pub t: u64,
    pub coeffs: SignGdCoefficients,
    pub mech: FiringMechanism,
    /// Calibrated weight sums per operand.
    pub w: [f64; 2],
    /// Calibrated idle currents per operand.
    pub b: [f64; 2],
    /// Times the inverse-sqrt fallback fired.
    pub degenerate: u64,
}

impl SignGdNeuronState {
    /// `v(0) = b / alpha1(0)` so that the first integration yields
    /// `v(1) = alpha2(1)/eta(1) * (b - eta(1) * sum_i W_i (2 s_i - 1))`.
    pub fn new(
        coeffs: SignGdCoefficients,
        mech: FiringMechanism,
        w: &[f64],
        b: &[f64],
    ) -> Result<Self> {
        let d = mech.arity();
        if w.len() != d || b.len() != d {
            return Err(Error::ArityMismatch { expected: d, got: w.len().max(b.len()) });
        }
        let mut st = SignGdNeuronState {
            u: 0.0,
            v: [0.0; 2],
            t: 0,
            coeffs,
            mech,
            w: [0.0; 2],
            b: [0.0; 2],
            degenerate: 0,
        };
        st.w[..d].copy_from_slice(w);
        st.b[..d].copy_from_slice(b);
        st.reset_state();
        Ok(st)
    }

    /// Restores the `t = 0` initial conditions.
    pub fn reset_state(&mut self) {
        let a0 = self.coeffs.alpha1(0);
        self.u = 0.0;
        self.v = [self.b[0] / a0, self.b[1] / a0];
        self.t = 0;
        self.degenerate = 0;
    }

    pub fn arity(&self) -> usize {
        self.mech.arity()
    }

    /// Decoded output after the last completed step: `eta(t)/beta2(t) * u(t+1)`.
    pub fn output(&self) -> f64 {
        self.coeffs.output_scale(self.t) * self.u
    }

    /// Decoded operand `k` at the last integrated step.
    pub fn decoded_input(&self, k: usize) -> f64 {
        self.coeffs.input_scale(self.t) * self.v[k]
    }

    /// Integrate step `t + 1`: `v <- alpha1(t) v - alpha2(t+1) (2 (I - b) - W)`.
    #[inline]
    pub fn integrate(&mut self, currents: &[f64]) {
        debug_assert_eq!(currents.len(), self.arity());
        let t = self.t;
        let a1 = self.coeffs.alpha1(t);
        let a2 = self.coeffs.alpha2(t + 1);
        for (k, &i) in currents.iter().enumerate() {
            self.v[k] = a1 * self.v[k] - a2 * (2.0 * (i - self.b[k]) - self.w[k]);
        }
    }

    /// Spike for step `t + 1`, evaluated on the decoded estimates.
    #[inline]
    pub fn fire(&mut self) -> f64 {
        let t = self.t;
        let y = self.coeffs.output_scale(t) * self.u;
        let xs = self.coeffs.input_scale(t + 1);
        let x = [xs * self.v[0], xs * self.v[1]];
        let (s, degenerate) = self.mech.fire(y, &x[..self.arity()]);
        if degenerate {
            self.degenerate += 1;
        }
        s
    }

    /// `u <- beta1(t+1) u - beta2(t+1) (2 s - 1)`; advances the step counter.
    #[inline]
    pub fn reset(&mut self, s: f64) {
        let t = self.t + 1;
        self.u = self.coeffs.beta1(t) * self.u - self.coeffs.beta2(t) * (2.0 * s - 1.0);
        self.t = t;
    }

    /// One full integrate, fire, reset cycle.
    #[inline]
    pub fn step(&mut self, currents: &[f64]) -> f64 {
        self.integrate(currents);
        let s = self.fire();
        self.reset(s);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{solve_signgd_coefficients, Parameterization, Schedule};

    fn canon(c: f64) -> SignGdCoefficients {
        solve_signgd_coefficients(Schedule::inverse(c).unwrap(), Parameterization::Canonical)
            .unwrap()
    }

    #[test]
    fn if_examples() {
        let p = IfLifParams::if_neuron(1.0, 1.0, 0.5);
        let mut st = IfLifState::new(&p);
        assert_eq!(if_step(&mut st, 0.7, &p), 1.0);
        assert!((st.u - 0.2).abs() < 1e-15);
        let p = IfLifParams::if_neuron(1.0, 1.0, 0.0);
        let mut st = IfLifState::new(&p);
        assert_eq!(if_step(&mut st, 0.0, &p), 0.0);
        assert_eq!(st.u, 0.0);
    }

    #[test]
    fn if_constant_input_rate() {
        let p = IfLifParams::if_neuron(1.0, 1.0, 0.0);
        let mut st = IfLifState::new(&p);
        let n: f64 = (0..1000).map(|_| if_step(&mut st, 0.5, &p)).sum();
        assert!((n / 1000.0 - 0.5).abs() <= 1e-3);
    }

    #[test]
    fn lif_examples() {
        let p = IfLifParams::lif_neuron(1.0, 1.0, 10.0, 0.0, 1.0);
        let mut st = IfLifState::new(&p);
        assert_eq!(lif_step(&mut st, 0.0, &p), 0.0);
        assert!((st.u - 0.9).abs() < 1e-15);
        let mut st = IfLifState::new(&p);
        assert_eq!(lif_step(&mut st, 10.0, &p), 1.0);
        assert!((st.u - 0.9).abs() < 1e-15);
    }

    #[test]
    fn subgrad_silent_input_fires_once() {
        let c = crate::schedules::solve_subgrad_coefficients(Schedule::inverse(1.0).unwrap())
            .unwrap();
        let mut st = SubgradNeuronState::new(c, 0.0);
        let spikes: Vec<f64> = (0..50).map(|_| subgrad_neuron_step(&mut st, 0.0)).collect();
        assert_eq!(spikes[0], 1.0);
        assert!(spikes[1..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn integrate_examples() {
        let mut n = SignGdNeuronState::new(canon(1.0), FiringMechanism::Relu, &[1.0], &[0.0])
            .unwrap();
        n.integrate(&[1.0]);
        assert_eq!(n.v[0], -0.5);
        let mut n = SignGdNeuronState::new(canon(1.0), FiringMechanism::Relu, &[1.0], &[0.0])
            .unwrap();
        for t in 1..5u64 {
            let before = n.v[0];
            n.integrate(&[0.0]);
            assert!((n.v[0] - before - 1.0 / (t as f64 + 1.0)).abs() < 1e-15);
            n.t += 1;
        }
    }

    #[test]
    fn reset_examples() {
        let mut n = SignGdNeuronState::new(canon(1.0), FiringMechanism::Relu, &[1.0], &[0.0])
            .unwrap();
        n.reset(1.0);
        assert_eq!(n.u, -0.5);
        n.reset_state();
        n.reset(0.0);
        assert_eq!(n.u, 0.5);
    }

    #[test]
    fn fire_examples() {
        use FiringMechanism::*;
        assert_eq!(Relu.fire(0.5, &[2.0]).0, 0.0);
        assert_eq!(Relu.fire(0.3, &[-1.0]).0, 1.0);
        assert_eq!(Gelu.fire(1.0, &[0.0]).0, 1.0);
        assert_eq!(Max2.fire(2.0, &[3.0, 1.0]).0, 0.0);
        assert_eq!(Square.fire(3.0, &[2.0]).0, 0.0);
        assert_eq!(MulInvSqrt.fire(1.0, &[1.0, 4.0]).0, 1.0);
        assert_eq!(MulInvSqrt.fire(0.4, &[1.0, 4.0]).0, 0.0);
        assert_eq!(MulInvSqrt.fire(-0.3, &[-1.0, 4.0]).0, 1.0);
        assert_eq!(MulInvSqrt.fire(-0.6, &[-1.0, 4.0]).0, 0.0);
        assert_eq!(MulInvSqrt.fire(-0.6, &[1.0, 0.0]), (0.0, true));
        assert_eq!(Gelu.fire(1.0, &[-1000.0]).0, 1.0);
        assert_eq!(Gelu.fire(-1.0, &[-1000.0]).0, 0.0);
    }

    #[test]
    fn arity_is_checked() {
        let r = SignGdNeuronState::new(canon(1.0), FiringMechanism::Max2, &[1.0], &[0.0]);
        assert!(matches!(r, Err(Error::ArityMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn names_round_trip() {
        for n in [
            "if", "lif", "subgrad", "signgd:relu", "signgd:leaky:0.1", "signgd:gelu",
            "signgd:max2", "signgd:square", "signgd:misr",
        ] {
            let k: NeuronKind = n.parse().unwrap();
            assert_eq!(k.to_string(), n);
        }
        assert!("signgd:tanh".parse::<NeuronKind>().is_err());
        assert!("foo".parse::<NeuronKind>().is_err());
    }
}
