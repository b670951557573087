//! Step-size schedules and the dynamics coefficients derived from them.
//!
//! A schedule is evaluated in closed form, so runs are not bounded by a
//! precomputed table. Coefficient sets are closed forms as well.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-size schedule `eta(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `c / (t + 1)`
    Inverse { c: f64 },
    /// `a * gamma^t`, with `0 < gamma <= 1`
    Exponential { a: f64, gamma: f64 },
    /// `c`
    Constant { c: f64 },
}

impl Schedule {
    pub fn inverse(c: f64) -> Result<Self> {
        positive("c", c)?;
        Ok(Schedule::Inverse { c })
    }

    pub fn exponential(a: f64, gamma: f64) -> Result<Self> {
        positive("a", a)?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "exponential gamma must lie in (0, 1], got {gamma}"
            )));
        }
        Ok(Schedule::Exponential { a, gamma })
    }

    pub fn constant(c: f64) -> Result<Self> {
        positive("c", c)?;
        Ok(Schedule::Constant { c })
    }

    /// Step size at step `t`. `t = 0` uses the same formula and is only read
    /// when initializing state.
    #[inline]
    pub fn eta(&self, t: u64) -> f64 {
        match *self {
            Schedule::Inverse { c } => c / (t as f64 + 1.0),
            Schedule::Exponential { a, gamma } => a * gamma.powf(t as f64),
            Schedule::Constant { c } => c,
        }
    }

    /// `ln eta(t)`, computed without forming `eta(t)` for the exponential kind.
    pub fn ln_eta(&self, t: u64) -> f64 {
        match *self {
            Schedule::Exponential { a, gamma } => a.ln() + t as f64 * gamma.ln(),
            _ => self.eta(t).ln(),
        }
    }

    /// Sum of `eta(1..=t_max)`: the largest magnitude a signed-schedule decoder
    /// can reach after `t_max` steps.
    pub fn reachable_range(&self, t_max: u64) -> f64 {
        (1..=t_max).map(|t| self.eta(t)).sum()
    }

    /// All three kinds are non-increasing in `t`.
    fn max_eta_from(&self, t: u64) -> f64 {
        self.eta(t)
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidSchedule(format!("{name} must be a positive finite number, got {v}")))
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Inverse { c } => write!(f, "inv:{c}"),
            Schedule::Exponential { a, gamma } => write!(f, "exp:{a}:{gamma}"),
            Schedule::Constant { c } => write!(f, "const:{c}"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// Parses `inv:<c>`, `exp:<a>:<gamma>` or `const:<c>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| -> Result<f64> {
            p.parse::<f64>()
                .map_err(|_| Error::InvalidSchedule(format!("`{p}` is not a number in `{s}`")))
        };
        match parts.as_slice() {
            ["inv", c] => Schedule::inverse(num(c)?),
            ["exp", a, g] => Schedule::exponential(num(a)?, num(g)?),
            ["const", c] => Schedule::constant(num(c)?),
            _ => Err(Error::InvalidSchedule(format!(
                "`{s}`: expected inv:<c>, exp:<a>:<gamma> or const:<c>"
            ))),
        }
    }
}

/// Named solutions of the sign-gradient coefficient constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// `alpha1 = beta1 = 1`, `alpha2 = beta2 = eta`.
    Canonical,
    /// Exponential schedules only: `alpha2 = beta2 = eta(1)` (constant update
    /// magnitude) and `alpha1 = beta1 = 1/gamma`.
    UnitCurrent,
}

impl FromStr for Parameterization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(Parameterization::Canonical),
            "unit-current" => Ok(Parameterization::UnitCurrent),
            _ => Err(Error::ParameterizationMismatch(format!(
                "unknown parameterization `{s}` (canonical | unit-current)"
            ))),
        }
    }
}

/// Any closed-form set of sign-gradient neuron coefficients.
pub trait SignGdCoefficientSet {
    fn alpha1(&self, t: u64) -> f64;
    fn alpha2(&self, t: u64) -> f64;
    fn beta1(&self, t: u64) -> f64;
    fn beta2(&self, t: u64) -> f64;
    /// `ln alpha2(t)`. Override when `alpha2` underflows before its ratios do.
    fn ln_alpha2(&self, t: u64) -> f64 {
        self.alpha2(t).ln()
    }
    /// `ln beta2(t)`. Override when `beta2` underflows before its ratios do.
    fn ln_beta2(&self, t: u64) -> f64 {
        self.beta2(t).ln()
    }
}

/// Coefficients of the sign-gradient neuron for one schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignGdCoefficients {
    pub schedule: Schedule,
    pub param: Parameterization,
    /// Multiplier applied to `beta1`. Always 1 except in negative controls.
    #[serde(default = "one")]
    pub beta1_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl SignGdCoefficients {
    /// Deliberately wrong copy used by negative controls.
    pub fn with_beta1_factor(mut self, factor: f64) -> Self {
        self.beta1_factor = factor;
        self
    }

    pub fn eta(&self, t: u64) -> f64 {
        self.schedule.eta(t)
    }

    /// Factor mapping the membrane variable `u(t+1)` to the decoded output
    /// after step `t`: `eta(t) / beta2(t)`.
    #[inline]
    pub fn output_scale(&self, t: u64) -> f64 {
        match self.param {
            Parameterization::Canonical => 1.0,
            Parameterization::UnitCurrent => self.schedule.eta(t) / self.beta2(t),
        }
    }

    /// Factor mapping `v(t)` to the decoded input at step `t`: `eta(t) / alpha2(t)`.
    #[inline]
    pub fn input_scale(&self, t: u64) -> f64 {
        match self.param {
            Parameterization::Canonical => 1.0,
            Parameterization::UnitCurrent => self.schedule.eta(t) / self.alpha2(t),
        }
    }
}

impl SignGdCoefficientSet for SignGdCoefficients {
    #[inline]
    fn alpha1(&self, _t: u64) -> f64 {
        match (self.param, self.schedule) {
            (Parameterization::UnitCurrent, Schedule::Exponential { gamma, .. }) => 1.0 / gamma,
            _ => 1.0,
        }
    }
    #[inline]
    fn alpha2(&self, t: u64) -> f64 {
        match self.param {
            Parameterization::Canonical => self.schedule.eta(t),
            Parameterization::UnitCurrent => self.schedule.eta(1),
        }
    }
    #[inline]
    fn beta1(&self, t: u64) -> f64 {
        self.alpha1(t) * self.beta1_factor
    }
    #[inline]
    fn beta2(&self, t: u64) -> f64 {
        self.alpha2(t)
    }
    fn ln_alpha2(&self, t: u64) -> f64 {
        match self.param {
            Parameterization::Canonical => self.schedule.ln_eta(t),
            Parameterization::UnitCurrent => self.schedule.ln_eta(1),
        }
    }
    fn ln_beta2(&self, t: u64) -> f64 {
        self.ln_alpha2(t)
    }
}

pub fn solve_signgd_coefficients(
    s: Schedule,
    param: Parameterization,
) -> Result<SignGdCoefficients> {
    if param == Parameterization::UnitCurrent && !matches!(s, Schedule::Exponential { .. }) {
        return Err(Error::ParameterizationMismatch(format!(
            "unit-current coefficients need an exponential schedule, got {s}"
        )));
    }
    Ok(SignGdCoefficients { schedule: s, param, beta1_factor: 1.0 })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Replays the coefficient constraint for `2 <= t <= t_max` plus the `t = 1`
/// anchor `eta(1) = alpha2(1) = beta2(1)`.
///
/// The membrane recurrences carry `u(t) = beta2(t-1)/eta(t-1) * f(t-1)` and
/// `v(t) = alpha2(t)/eta(t) * x(t)`, which holds iff
/// `eta(t)/eta(t-1) = beta2(t) / (beta1(t) beta2(t-1)) = alpha2(t) / (alpha1(t-1) alpha2(t-1))`.
/// Ratios are compared with a relative tolerance.
pub fn validate_signgd_coefficients<C: SignGdCoefficientSet>(
    c: &C,
    s: &Schedule,
    t_max: u64,
    tol: f64,
) -> bool {
    let e1 = s.eta(1);
    if !close(e1, c.alpha2(1), tol) || !close(e1, c.beta2(1), tol) {
        return false;
    }
    (2..=t_max).all(|t| {
        // ln space keeps the ratios exact after the step sizes underflow
        let ratio = (s.ln_eta(t) - s.ln_eta(t - 1)).exp();
        let u_ratio = (c.ln_beta2(t) - c.ln_beta2(t - 1)).exp() / c.beta1(t);
        let v_ratio = (c.ln_alpha2(t) - c.ln_alpha2(t - 1)).exp() / c.alpha1(t - 1);
        close(ratio, u_ratio, tol) && close(ratio, v_ratio, tol)
    })
}

/// Coefficients of the generalized subgradient neuron.
pub trait SubgradCoefficientSet {
    fn alpha(&self, t: u64) -> f64;
    fn beta(&self, t: u64) -> f64;
    fn gamma(&self, t: u64) -> f64;
}

/// Canonical solution `alpha(t) = 1 - eta(t+1)`, `beta = gamma = eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgradCoefficients {
    pub schedule: Schedule,
}

impl SubgradCoefficientSet for SubgradCoefficients {
    #[inline]
    fn alpha(&self, t: u64) -> f64 {
        1.0 - self.schedule.eta(t + 1)
    }
    #[inline]
    fn beta(&self, t: u64) -> f64 {
        self.schedule.eta(t)
    }
    #[inline]
    fn gamma(&self, t: u64) -> f64 {
        self.schedule.eta(t)
    }
}

pub fn solve_subgrad_coefficients(s: Schedule) -> Result<SubgradCoefficients> {
    let eta = s.max_eta_from(1);
    if eta >= 1.0 {
        return Err(Error::ScheduleOutOfRange { t: 1, eta });
    }
    Ok(SubgradCoefficients { schedule: s })
}

/// Checks both subgradient-neuron conditions for every `1 <= i <= t <= t_max`.
///
/// Products are accumulated as prefix sums of logarithms; every comparison is
/// done on log values with absolute tolerance `tol`.
pub fn validate_subgrad_coefficients<C: SubgradCoefficientSet>(
    c: &C,
    s: &Schedule,
    t_max: u64,
    tol: f64,
) -> bool {
    let n = t_max as usize;
    // log_one_minus[k] = sum_{j=1..k} ln(1 - eta(j)); log_alpha[k] = sum_{j=0..k-1} ln alpha(j)
    let mut log_one_minus = vec![0.0; n + 1];
    let mut log_alpha = vec![0.0; n + 1];
    for k in 1..=n {
        let one_minus = 1.0 - s.eta(k as u64);
        let a = c.alpha(k as u64 - 1);
        if one_minus <= 0.0 || a <= 0.0 {
            return false;
        }
        log_one_minus[k] = log_one_minus[k - 1] + one_minus.ln();
        log_alpha[k] = log_alpha[k - 1] + a.ln();
    }
    for t in 2..=t_max {
        let lhs = c.beta(t) / s.eta(t) * (1.0 - s.eta(t));
        let rhs = c.beta(t - 1) / s.eta(t - 1) * c.alpha(t - 1);
        if !close(lhs, rhs, tol) {
            return false;
        }
    }
    for t in 1..=n {
        let ln_eta_t = s.ln_eta(t as u64);
        let ln_beta_t = c.beta(t as u64).ln();
        for i in 1..=t {
            let lhs = s.ln_eta(i as u64) - ln_eta_t + (log_one_minus[t] - log_one_minus[i]);
            let rhs = c.gamma(i as u64).ln() - ln_beta_t + (log_alpha[t] - log_alpha[i]);
            if (lhs - rhs).abs() > tol {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_examples() {
        assert_eq!(Schedule::inverse(1.0).unwrap().eta(3), 0.25);
        assert_eq!(Schedule::exponential(0.15, 0.965).unwrap().eta(0), 0.15);
        assert_eq!(Schedule::constant(0.1).unwrap().eta(7), 0.1);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Schedule::inverse(0.0).is_err());
        assert!(Schedule::constant(-1.0).is_err());
        assert!(Schedule::exponential(0.1, 1.5).is_err());
        assert!(Schedule::exponential(0.1, 0.0).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for s in ["inv:1", "exp:0.15:0.965", "const:0.1"] {
            let parsed: Schedule = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        assert!("inv".parse::<Schedule>().is_err());
        assert!("exp:1".parse::<Schedule>().is_err());
        assert!("inv:abc".parse::<Schedule>().is_err());
    }

    #[test]
    fn canonical_inverse_values() {
        let s = Schedule::inverse(1.0).unwrap();
        let c = solve_signgd_coefficients(s, Parameterization::Canonical).unwrap();
        for t in 1..50 {
            assert_eq!(c.alpha1(t), 1.0);
            assert_eq!(c.beta1(t), 1.0);
            assert_eq!(c.alpha2(t), 1.0 / (t as f64 + 1.0));
        }
        assert!(validate_signgd_coefficients(&c, &s, 1000, 1e-12));
    }

    #[test]
    fn unit_current_values() {
        let s = Schedule::exponential(0.15, 0.965).unwrap();
        let c = solve_signgd_coefficients(s, Parameterization::UnitCurrent).unwrap();
        assert!((c.alpha2(5) - 0.14475).abs() < 1e-15);
        assert!((c.alpha1(3) - 1.0 / 0.965).abs() < 1e-15);
        assert!(validate_signgd_coefficients(&c, &s, 1000, 1e-12));
    }

    #[test]
    fn unit_current_needs_exponential() {
        let s = Schedule::inverse(1.0).unwrap();
        assert!(matches!(
            solve_signgd_coefficients(s, Parameterization::UnitCurrent),
            Err(Error::ParameterizationMismatch(_))
        ));
    }

    #[test]
    fn perturbed_beta1_fails_validation() {
        let s = Schedule::inverse(1.0).unwrap();
        let c = solve_signgd_coefficients(s, Parameterization::Canonical)
            .unwrap()
            .with_beta1_factor(1.0 + 1e-3);
        assert!(!validate_signgd_coefficients(&c, &s, 1000, 1e-12));
    }

    #[test]
    fn subgrad_examples() {
        let s = Schedule::inverse(1.0).unwrap();
        let c = solve_subgrad_coefficients(s).unwrap();
        assert!((c.alpha(3) - 4.0 / 5.0).abs() < 1e-15);
        assert_eq!(c.beta(3), 0.25);
        let tau = 10.0;
        let c = solve_subgrad_coefficients(Schedule::constant(1.0 / tau).unwrap()).unwrap();
        assert!((c.alpha(7) - (tau - 1.0) / tau).abs() < 1e-15);
        let s = Schedule::exponential(0.15, 0.95).unwrap();
        let c = solve_subgrad_coefficients(s).unwrap();
        assert!((c.alpha(4) - (1.0 - 0.15 * 0.95f64.powi(5))).abs() < 1e-15);
        assert!(validate_subgrad_coefficients(&c, &s, 300, 1e-10));
    }

    #[test]
    fn subgrad_rejects_large_steps() {
        assert!(matches!(
            solve_subgrad_coefficients(Schedule::constant(1.0).unwrap()),
            Err(Error::ScheduleOutOfRange { .. })
        ));
        assert!(solve_subgrad_coefficients(Schedule::inverse(2.0).unwrap()).is_err());
    }

    struct Skewed(SubgradCoefficients);
    impl SubgradCoefficientSet for Skewed {
        fn alpha(&self, t: u64) -> f64 {
            self.0.alpha(t) * 1.001
        }
        fn beta(&self, t: u64) -> f64 {
            self.0.beta(t)
        }
        fn gamma(&self, t: u64) -> f64 {
            self.0.gamma(t)
        }
    }

    #[test]
    fn subgrad_validator_detects_skew() {
        let s = Schedule::inverse(1.0).unwrap();
        let c = Skewed(solve_subgrad_coefficients(s).unwrap());
        assert!(!validate_subgrad_coefficients(&c, &s, 100, 1e-10));
    }
}
