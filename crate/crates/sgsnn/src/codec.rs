//! Spike coding: encoders that turn a real value into a train and decoders
//! that turn a train back into a running estimate.
//!
//! Random encoders use `ChaCha8Rng` seeded with `seed_from_u64`, so a seed
//! reproduces the same train on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::schedules::Schedule;

/// Time-ordered values in {0, 1}.
pub type SpikeTrain = Vec<f64>;
/// Time-ordered real values (relaxed spikes).
pub type CurrentTrain = Vec<f64>;

/// Step function with `H(0) = 1`.
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `sign(0) = +1`, consistent with [`heaviside`].
#[inline]
pub fn sign(x: f64) -> f64 {
    2.0 * heaviside(x) - 1.0
}

/// `min(max(x, 0), 1)`
#[inline]
pub fn relu1(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scheme {
    /// Running mean of the train.
    Rate,
    /// Exponential moving average with base `tau`.
    Ema { tau: f64 },
    /// `y(t) = y(t-1) - eta(t) (2 s(t) - 1)`.
    Signed(Schedule),
    /// `y(t) = (1 - eta(t)) y(t-1) + eta(t) s(t)`, the output coding of the
    /// generalized subgradient neuron.
    Smoothed(Schedule),
}

/// Running decoder, `y(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoder {
    pub scheme: Scheme,
    pub y: f64,
    pub t: u64,
}

impl Decoder {
    pub fn new(scheme: Scheme) -> Self {
        Decoder { scheme, y: 0.0, t: 0 }
    }

    /// Feeds `s(t)` for `t = self.t + 1` and returns `y(t)`.
    #[inline]
    pub fn step(&mut self, s: f64) -> f64 {
        self.t += 1;
        let t = self.t;
        self.y = match self.scheme {
            Scheme::Rate => {
                let tf = t as f64;
                self.y * (tf - 1.0) / tf + s / tf
            }
            Scheme::Ema { tau } => self.y * (tau - 1.0) / tau + s / tau,
            Scheme::Signed(sch) => self.y - sch.eta(t) * (2.0 * s - 1.0),
            Scheme::Smoothed(sch) => {
                let e = sch.eta(t);
                (1.0 - e) * self.y + e * s
            }
        };
        self.y
    }

    pub fn decode(scheme: Scheme, train: &[f64]) -> Vec<f64> {
        let mut d = Decoder::new(scheme);
        train.iter().map(|&s| d.step(s)).collect()
    }
}

/// Streaming encoder. `next()` yields the value for `t = 1, 2, ...`.
#[derive(Debug, Clone)]
pub enum Encoder {
    /// Real-valued relaxed spikes `0.5 (1 + grad)` for signed-schedule coding.
    Float { x: f64, f: f64, t: u64, schedule: Schedule },
    /// Binary spikes `H(f - x)` for signed-schedule coding.
    Deterministic { x: f64, f: f64, t: u64, schedule: Schedule },
    /// Bernoulli spikes with `p = sigmoid(c (f - x))` for signed-schedule coding.
    Stochastic { x: f64, f: f64, t: u64, schedule: Schedule, c: f64, rng: ChaCha8Rng },
    /// Constant current `x` (float input for rate-family neurons).
    Constant { x: f64 },
    /// Bernoulli(ReLU1(x)) spikes for rate coding.
    Poisson { p: f64, rng: ChaCha8Rng },
    /// Deterministic rate-coded spikes: `I(t) = H(x - (t-1)/t * xr(t-1))`
    /// where `xr` is the running mean of the emitted spikes.
    RateDeterministic { x: f64, xr: f64, t: u64 },
    /// Deterministic EMA-coded spikes: `I(t) = H(x - (tau-1)/tau * xe(t-1))`.
    EmaDeterministic { x: f64, xe: f64, tau: f64 },
}

impl Encoder {
    pub fn float(x: f64, schedule: Schedule) -> Self {
        Encoder::Float { x, f: 0.0, t: 0, schedule }
    }
    pub fn deterministic(x: f64, schedule: Schedule) -> Self {
        Encoder::Deterministic { x, f: 0.0, t: 0, schedule }
    }
    pub fn stochastic(x: f64, schedule: Schedule, c: f64, seed: u64) -> Self {
        Encoder::Stochastic { x, f: 0.0, t: 0, schedule, c, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
    pub fn constant(x: f64) -> Self {
        Encoder::Constant { x }
    }
    pub fn poisson(x: f64, seed: u64) -> Self {
        Encoder::Poisson { p: relu1(x), rng: ChaCha8Rng::seed_from_u64(seed) }
    }
    pub fn rate_deterministic(x: f64) -> Self {
        Encoder::RateDeterministic { x, xr: 0.0, t: 0 }
    }
    pub fn ema_deterministic(x: f64, tau: f64) -> Self {
        Encoder::EmaDeterministic { x, xe: 0.0, tau }
    }

    /// The encoder's internal estimate after the last emitted value, when it
    /// keeps one.
    pub fn state(&self) -> Option<f64> {
        match *self {
            Encoder::Float { f, .. }
            | Encoder::Deterministic { f, .. }
            | Encoder::Stochastic { f, .. } => Some(f),
            Encoder::RateDeterministic { xr, .. } => Some(xr),
            Encoder::EmaDeterministic { xe, .. } => Some(xe),
            Encoder::Constant { .. } | Encoder::Poisson { .. } => None,
        }
    }

    #[inline]
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> f64 {
        match self {
            Encoder::Float { x, f, t, schedule } => {
                *t += 1;
                let grad = *f - *x;
                *f -= schedule.eta(*t) * grad;
                0.5 * (1.0 + grad)
            }
            Encoder::Deterministic { x, f, t, schedule } => {
                *t += 1;
                let s = heaviside(*f - *x);
                *f -= schedule.eta(*t) * (2.0 * s - 1.0);
                s
            }
            Encoder::Stochastic { x, f, t, schedule, c, rng } => {
                *t += 1;
                let p = sigmoid(*c * (*f - *x));
                let s = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
                *f -= schedule.eta(*t) * (2.0 * s - 1.0);
                s
            }
            Encoder::Constant { x } => *x,
            Encoder::Poisson { p, rng } => {
                if rng.random::<f64>() < *p {
                    1.0
                } else {
                    0.0
                }
            }
            Encoder::RateDeterministic { x, xr, t } => {
                *t += 1;
                let tf = *t as f64;
                let s = heaviside(*x - (tf - 1.0) / tf * *xr);
                *xr = *xr * (tf - 1.0) / tf + s / tf;
                s
            }
            Encoder::EmaDeterministic { x, xe, tau } => {
                let decay = (*tau - 1.0) / *tau;
                let s = heaviside(*x - decay * *xe);
                *xe = decay * *xe + s / *tau;
                s
            }
        }
    }

    pub fn take(mut self, steps: usize) -> Vec<f64> {
        (0..steps).map(|_| self.next()).collect()
    }
}

pub fn encode_float(x: f64, schedule: &Schedule, steps: usize) -> CurrentTrain {
    Encoder::float(x, *schedule).take(steps)
}

pub fn encode_deterministic(x: f64, schedule: &Schedule, steps: usize) -> SpikeTrain {
    Encoder::deterministic(x, *schedule).take(steps)
}

/// `c` must lie in `[0, 1]`.
pub fn encode_stochastic(x: f64, schedule: &Schedule, steps: usize, c: f64, seed: u64) -> SpikeTrain {
    assert!((0.0..=1.0).contains(&c), "stochastic encoder gain must lie in [0, 1], got {c}");
    Encoder::stochastic(x, *schedule, c, seed).take(steps)
}

pub fn encode_poisson(x: f64, steps: usize, seed: u64) -> SpikeTrain {
    Encoder::poisson(x, seed).take(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv1() -> Schedule {
        Schedule::inverse(1.0).unwrap()
    }

    #[test]
    fn decoder_examples() {
        let y = Decoder::decode(Scheme::Rate, &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(y[3], 0.5);
        let y = Decoder::decode(Scheme::Ema { tau: 2.0 }, &[1.0, 1.0]);
        assert_eq!(y[1], 0.75);
        let y = Decoder::decode(Scheme::Signed(inv1()), &[1.0, 1.0]);
        assert!((y[1] + 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn float_encoder_examples() {
        assert_eq!(encode_float(0.0, &inv1(), 1), vec![0.5]);
        let tr = encode_float(2.0, &Schedule::constant(1.0).unwrap(), 2);
        assert_eq!(tr, vec![-0.5, 0.5]);
    }

    #[test]
    fn deterministic_encoder_example() {
        let tr = encode_deterministic(0.3, &inv1(), 3);
        assert_eq!(tr, vec![0.0, 1.0, 0.0]);
        let y = Decoder::decode(Scheme::Signed(inv1()), &tr);
        assert!((y[2] - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_zero_stays_within_one_step() {
        let tr = encode_deterministic(0.0, &inv1(), 8);
        assert_eq!(tr, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let y = Decoder::decode(Scheme::Signed(inv1()), &tr);
        for (i, v) in y.iter().enumerate() {
            assert!(v.abs() <= inv1().eta(i as u64 + 1) + 1e-15);
        }
    }

    #[test]
    fn deterministic_saturates_out_of_range() {
        let s = Schedule::exponential(0.15, 0.965).unwrap();
        let tr = encode_deterministic(100.0, &s, 500);
        assert!(tr.iter().all(|&v| v == 0.0));
        let y = Decoder::decode(Scheme::Signed(s), &tr);
        assert!((y[499] - s.reachable_range(500)).abs() < 1e-12);
    }

    #[test]
    fn stochastic_zero_gain_is_fair_coin() {
        let tr = encode_stochastic(5.0, &inv1(), 20_000, 0.0, 7);
        let mean = tr.iter().sum::<f64>() / tr.len() as f64;
        assert!((mean - 0.5).abs() < 0.02);
    }

    #[test]
    fn stochastic_is_reproducible() {
        let a = encode_stochastic(0.4, &inv1(), 300, 1.0, 42);
        let b = encode_stochastic(0.4, &inv1(), 300, 1.0, 42);
        let c = encode_stochastic(0.4, &inv1(), 300, 1.0, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn poisson_examples() {
        assert!(encode_poisson(0.0, 100, 1).iter().all(|&s| s == 0.0));
        assert!(encode_poisson(1.5, 100, 1).iter().all(|&s| s == 1.0));
        let tr = encode_poisson(0.5, 10_000, 3);
        let y = Decoder::decode(Scheme::Rate, &tr);
        assert!((y[9_999] - 0.5).abs() < 0.02);
    }

    #[test]
    fn rate_deterministic_error_is_one_over_t() {
        for &x in &[0.0, 0.13, 0.5, 0.77, 1.0] {
            let mut e = Encoder::rate_deterministic(x);
            for t in 1..=2000u64 {
                e.next();
                let xr = e.state().unwrap();
                assert!((xr - x).abs() <= 1.0 / t as f64 + 1e-12, "x={x} t={t} xr={xr}");
            }
        }
    }
}
