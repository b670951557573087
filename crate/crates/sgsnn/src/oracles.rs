//! Optimizer-form reference iterations.
//!
//! Every neuron model in [`crate::neurons`] has a counterpart here written as a
//! plain first-order iteration on an explicit objective. The two are computed
//! independently so tests can compare them step for step.

use serde::{Deserialize, Serialize};

use crate::codec::{heaviside, relu1, sigmoid, sign};
use crate::error::{Error, Result};
use crate::neurons::{FiringMechanism, GELU_SLOPE};

/// Target functions of the squared-error objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Relu,
    Relu1,
    Leaky(f64),
    GeluSigmoid,
    Max2,
    Square,
    MulInvSqrt,
}

impl From<FiringMechanism> for Target {
    fn from(m: FiringMechanism) -> Self {
        match m {
            FiringMechanism::Relu => Target::Relu,
            FiringMechanism::LeakyRelu { delta } => Target::Leaky(delta),
            FiringMechanism::Gelu => Target::GeluSigmoid,
            FiringMechanism::Max2 => Target::Max2,
            FiringMechanism::Square => Target::Square,
            FiringMechanism::MulInvSqrt => Target::MulInvSqrt,
        }
    }
}

/// Exact target value. Only the inverse square root has a restricted domain.
pub fn reference_nonlinearity(target: Target, x: &[f64]) -> Result<f64> {
    Ok(match target {
        Target::Relu => x[0].max(0.0),
        Target::Relu1 => relu1(x[0]),
        Target::Leaky(d) => {
            if x[0] >= 0.0 {
                x[0]
            } else {
                d * x[0]
            }
        }
        Target::GeluSigmoid => x[0] * sigmoid(GELU_SLOPE * x[0]),
        Target::Max2 => x[0].max(x[1]),
        Target::Square => x[0] * x[0],
        Target::MulInvSqrt => {
            if !(x[1] > 0.0) {
                return Err(Error::Domain(format!("x1/sqrt(x2) needs x2 > 0, got {}", x[1])));
            }
            x[0] / x[1].sqrt()
        }
    })
}

/// Objective `L(y; x)` minimized over `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// `ReLU(R x / theta - y) + y^2 / 2`, minimizer `ReLU1(R x / theta)`.
    If { theta: f64, r: f64 },
    /// `ReLU(R x / (theta (tau-1)) - 1/(tau-1) - y) + y^2/2 + u_rest y / (theta (tau-1))`.
    /// With `u_rest = 0` the minimizer is `ReLU1(R x / (theta (tau-1)) - 1/(tau-1))`.
    Lif { theta: f64, r: f64, tau: f64, u_rest: f64 },
    /// `(y - target(x))^2 / 2`.
    SqErr(Target),
}

impl Objective {
    fn lif_shift(theta: f64, r: f64, tau: f64, x: f64) -> f64 {
        r * x / (theta * (tau - 1.0)) - 1.0 / (tau - 1.0)
    }

    pub fn value(&self, y: f64, x: &[f64]) -> Result<f64> {
        Ok(match *self {
            Objective::If { theta, r } => (r * x[0] / theta - y).max(0.0) + 0.5 * y * y,
            Objective::Lif { theta, r, tau, u_rest } => {
                (Self::lif_shift(theta, r, tau, x[0]) - y).max(0.0)
                    + 0.5 * y * y
                    + u_rest * y / (theta * (tau - 1.0))
            }
            Objective::SqErr(t) => {
                let d = y - reference_nonlinearity(t, x)?;
                0.5 * d * d
            }
        })
    }

    /// Subgradient in `y`, choosing the step-function branch `H(0) = 1` at kinks.
    pub fn subgradient(&self, y: f64, x: &[f64]) -> Result<f64> {
        Ok(match *self {
            Objective::If { theta, r } => y - heaviside(r * x[0] / theta - y),
            Objective::Lif { theta, r, tau, u_rest } => {
                y + u_rest / (theta * (tau - 1.0)) - heaviside(Self::lif_shift(theta, r, tau, x[0]) - y)
            }
            Objective::SqErr(t) => y - reference_nonlinearity(t, x)?,
        })
    }

    /// Claimed minimizer (closed form).
    pub fn minimizer(&self, x: &[f64]) -> Result<f64> {
        match *self {
            Objective::If { theta, r } => Ok(relu1(r * x[0] / theta)),
            Objective::Lif { theta, r, tau, u_rest } => {
                if u_rest != 0.0 {
                    return Err(Error::Domain("no closed-form minimizer for u_rest != 0".into()));
                }
                Ok(relu1(Self::lif_shift(theta, r, tau, x[0])))
            }
            Objective::SqErr(t) => reference_nonlinearity(t, x),
        }
    }
}

/// `f - eta * g(f; x)`.
pub fn subgradient_step(f: f64, x: &[f64], obj: &Objective, eta: f64) -> Result<f64> {
    Ok(f - eta * obj.subgradient(f, x)?)
}

/// `f - eta * sign(g(f; x))` with `sign(0) = +1`.
///
/// For the inverse square root with `x2 <= 0` the step falls back to
/// `f - eta * sign(f)`, which drives the estimate toward zero.
pub fn signgd_oracle_step(f: f64, x: &[f64], target: Target, eta: f64) -> f64 {
    let g = match reference_nonlinearity(target, x) {
        Ok(v) => f - v,
        Err(_) => f,
    };
    f - eta * sign(g)
}

/// Runs the IF-objective subgradient method with step `1/(t+1)` on the input
/// estimates `x_tilde[t-1] = x(t)`. Returns `f(0..=T)` with
/// `f(0) = (theta - u0) / theta`.
pub fn if_oracle_trace(x_tilde: &[f64], theta: f64, r: f64, u0: f64) -> Vec<f64> {
    let obj = Objective::If { theta, r };
    let mut f = (theta - u0) / theta;
    let mut out = Vec::with_capacity(x_tilde.len() + 1);
    out.push(f);
    for (k, &x) in x_tilde.iter().enumerate() {
        let t = (k + 1) as f64;
        f = subgradient_step(f, &[x], &obj, 1.0 / (t + 1.0)).expect("if objective is total");
        out.push(f);
    }
    out
}

/// LIF-objective subgradient method with constant step `1/tau`, starting
/// from `f(0) = y(0) - u0/(tau theta) - u_rest/(theta tau (tau-1))` with `y(0) = 0`.
pub fn lif_oracle_trace(x_tilde: &[f64], theta: f64, r: f64, tau: f64, u_rest: f64, u0: f64) -> Vec<f64> {
    let obj = Objective::Lif { theta, r, tau, u_rest };
    let mut f = lif_transform(0.0, 0, u0, u_rest, theta, tau);
    let mut out = Vec::with_capacity(x_tilde.len() + 1);
    out.push(f);
    for &x in x_tilde {
        f = subgradient_step(f, &[x], &obj, 1.0 / tau).expect("lif objective is total");
        out.push(f);
    }
    out
}

/// Maps the rate-decoded IF output `y(t)` into the optimizer coordinate:
/// `t/(t+1) y(t) - (u0 - theta)/(theta (t+1))`.
pub fn if_transform(y_t: f64, t: u64, u0: f64, theta: f64) -> f64 {
    let tf = t as f64;
    tf / (tf + 1.0) * y_t - (u0 - theta) / (theta * (tf + 1.0))
}

/// Maps the EMA-decoded LIF output `y(t)` into the optimizer coordinate:
/// `y(t) - d^t u0 / (tau theta) - u_rest sum_{i=0..t} d^(t-i) / (theta tau (tau-1))`
/// with `d = (tau-1)/tau`.
pub fn lif_transform(y_t: f64, t: u64, u0: f64, u_rest: f64, theta: f64, tau: f64) -> f64 {
    let d = (tau - 1.0) / tau;
    let dt = d.powf(t as f64);
    // sum_{k=0..t} d^k
    let geo = if d == 0.0 { 1.0 } else { (1.0 - d * dt) / (1.0 - d) };
    y_t - dt * u0 / (tau * theta) - u_rest * geo / (theta * tau * (tau - 1.0))
}

/// `h(i) = 1 - sqrt((i-1)/(i+1))`.
pub fn nondiff_term(i: u64) -> f64 {
    let i = i as f64;
    1.0 - ((i - 1.0) / (i + 1.0)).sqrt()
}

/// Upper bound on `(f(t) - f*)^2` for the IF-objective subgradient method:
/// `(f0 - f*)^2/(t+1) + (M+1)/(t+1) sum h(i) + 4/(t+1) sum min(|x - x(i)|, 1)`,
/// sums over `i = 1..t`. `x_tilde_history[i-1]` holds `x(i)`.
pub fn convergence_bound(f0: f64, f_star: f64, m: f64, x: f64, x_tilde_history: &[f64], t: u64) -> f64 {
    let mut b = BoundAccumulator::new(f0, f_star, m, x);
    let mut out = b.value();
    for &xt in &x_tilde_history[..t as usize] {
        out = b.push(xt);
    }
    out
}

/// First step whose iterate leaves the radius `m` assumed by
/// [`convergence_bound`]. The bound is only valid while this is `None`.
pub fn radius_breach(trace: &[f64], m: f64) -> Option<usize> {
    trace.iter().position(|f| f.abs() >= m)
}

/// Incremental form of [`convergence_bound`], one `push` per step.
#[derive(Debug, Clone)]
pub struct BoundAccumulator {
    init: f64,
    m: f64,
    x: f64,
    t: u64,
    sum_h: f64,
    sum_input: f64,
}

impl BoundAccumulator {
    pub fn new(f0: f64, f_star: f64, m: f64, x: f64) -> Self {
        BoundAccumulator { init: (f0 - f_star).powi(2), m, x, t: 0, sum_h: 0.0, sum_input: 0.0 }
    }

    /// Adds `x(t)` for the next `t` and returns the bound at that `t`.
    pub fn push(&mut self, x_tilde: f64) -> f64 {
        self.t += 1;
        self.sum_h += nondiff_term(self.t);
        self.sum_input += (self.x - x_tilde).abs().min(1.0);
        self.value()
    }

    pub fn value(&self) -> f64 {
        let n = self.t as f64 + 1.0;
        self.init / n + (self.m + 1.0) / n * self.sum_h + 4.0 / n * self.sum_input
    }
}
