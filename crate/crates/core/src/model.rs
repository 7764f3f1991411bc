//! Plant, sensors, measurement noise and attack signals.
//!
//! The plant is
//!
//! ```text
//! x(k+1) = A x(k) + G f(H x(k)) + rho(u(k))
//! y~(k)  = C x(k) + a(k) + m(k)
//! ```
//!
//! where `f` acts entrywise on `H x` and `rho(u) = B u`. Noise and attack
//! samples are pure functions of `(seed, k)`: each draw seeks its ChaCha
//! stream to a fixed word offset, so any step can be regenerated without
//! replaying the ones before it.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::sensors::SensorSet;

/// Scalar nonlinearities available to scenario files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Nonlinearity {
    Zero,
    Linear {
        slope: f64,
    },
    /// `amplitude * sin(frequency * s)`
    Sine {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
    /// `amplitude * tanh(gain * s)`
    Tanh {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        gain: f64,
    },
    /// `clamp(s, -limit, limit)`
    Saturation { limit: f64 },
}

fn one() -> f64 {
    1.0
}

impl Nonlinearity {
    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Linear { slope } => slope * s,
            Nonlinearity::Sine {
                amplitude,
                frequency,
            } => amplitude * (frequency * s).sin(),
            Nonlinearity::Tanh { amplitude, gain } => amplitude * (gain * s).tanh(),
            Nonlinearity::Saturation { limit } => s.clamp(-limit, limit),
        }
    }

    /// Smallest `L` with `|f(s) - f(t)| <= L |s - t|`.
    pub fn slope_bound(&self) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Linear { slope } => slope.abs(),
            Nonlinearity::Sine {
                amplitude,
                frequency,
            } => (amplitude * frequency).abs(),
            Nonlinearity::Tanh { amplitude, gain } => (amplitude * gain).abs(),
            Nonlinearity::Saturation { .. } => 1.0,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let finite = |v: f64, name: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{path}.{name}"), "must be finite"))
            }
        };
        match *self {
            Nonlinearity::Zero => Ok(()),
            Nonlinearity::Linear { slope } => finite(slope, "slope"),
            Nonlinearity::Sine {
                amplitude,
                frequency,
            } => finite(amplitude, "amplitude").and(finite(frequency, "frequency")),
            Nonlinearity::Tanh { amplitude, gain } => {
                finite(amplitude, "amplitude").and(finite(gain, "gain"))
            }
            Nonlinearity::Saturation { limit } => {
                if limit.is_finite() && limit >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("{path}.limit"), "must be finite and >= 0"))
                }
            }
        }
    }
}

/// The plant `x+ = A x + G f(H x) + B u`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    a: DMatrix<f64>,
    g: DMatrix<f64>,
    h: DMatrix<f64>,
    c: DMatrix<f64>,
    b: DMatrix<f64>,
    f: Nonlinearity,
}

impl PlantModel {
    pub fn new(
        a: DMatrix<f64>,
        g: DMatrix<f64>,
        h: DMatrix<f64>,
        c: DMatrix<f64>,
        b: DMatrix<f64>,
        f: Nonlinearity,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::config(
                "matrices.A",
                format!("must be square and nonempty, got {}x{}", a.nrows(), a.ncols()),
            ));
        }
        let r = h.nrows();
        if r == 0 || h.ncols() != n {
            return Err(Error::config(
                "matrices.H",
                format!("expected r x {n} with r >= 1, got {}x{}", h.nrows(), h.ncols()),
            ));
        }
        if g.nrows() != n || g.ncols() != r {
            return Err(Error::config(
                "matrices.G",
                format!("expected {n}x{r}, got {}x{}", g.nrows(), g.ncols()),
            ));
        }
        if c.nrows() == 0 || c.ncols() != n {
            return Err(Error::config(
                "matrices.C",
                format!("expected p x {n} with p >= 1, got {}x{}", c.nrows(), c.ncols()),
            ));
        }
        if c.nrows() > crate::sensors::MAX_SENSORS {
            return Err(Error::config("matrices.C", "too many sensors"));
        }
        if b.nrows() != n {
            return Err(Error::config(
                "matrices.B",
                format!("expected {n} rows, got {}", b.nrows()),
            ));
        }
        for (name, m) in [("A", &a), ("G", &g), ("H", &h), ("C", &c), ("B", &b)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("matrices.{name}"), "entries must be finite"));
            }
        }
        f.validate("nonlinearity")?;
        Ok(PlantModel { a, g, h, c, b, f })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn r(&self) -> usize {
        self.h.nrows()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Input dimension (columns of `B`).
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.f
    }

    /// `G f(s)` with `f` applied entrywise to `s` (length r).
    pub fn nonlinear_term(&self, s: &DVector<f64>) -> DVector<f64> {
        let fs = s.map(|v| self.f.eval(v));
        &self.g * fs
    }

    /// Known exogenous term `rho(u) = B u`.
    pub fn rho(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.b * u
    }

    pub fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::config(
                "state",
                format!("expected length {}, got {}", self.n(), x.len()),
            ));
        }
        Ok(())
    }

    pub fn check_input(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.m() {
            return Err(Error::config(
                "input",
                format!("expected length {}, got {}", self.m(), u.len()),
            ));
        }
        Ok(())
    }

    /// One step of the true dynamics.
    pub fn plant_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        self.check_input(u)?;
        Ok(self.step_unchecked(x, u))
    }

    pub(crate) fn step_unchecked(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let hx = &self.h * x;
        &self.a * x + self.nonlinear_term(&hx) + self.rho(u)
    }

    /// Noise- and attack-free output `C x`.
    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }
}

/// Per-component noise distribution, scaled to `tau * bound`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    /// Uniform on the open interval `(-tau*bound, tau*bound)`.
    #[default]
    Uniform,
    /// Random sign times `tau*bound`.
    Extremal,
    /// Always zero.
    Off,
}

/// Bounded measurement noise with `|m_i(k)| <= tau * bound`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    bound: f64,
    scale: f64,
    distribution: NoiseDistribution,
    seed: u64,
    stream: u64,
}

impl NoiseModel {
    pub fn new(bound: f64, scale: f64, distribution: NoiseDistribution, seed: u64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::config("noise.bound", "must be a positive finite number"));
        }
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::config("noise.scale", "must lie in (0, 1]"));
        }
        Ok(NoiseModel {
            bound,
            scale,
            distribution,
            seed,
            stream: rng::NOISE,
        })
    }

    /// Same distribution on a different random stream.
    pub fn with_stream(mut self, seed: u64, stream: u64) -> Self {
        self.seed = seed;
        self.stream = stream;
        self
    }

    pub fn with_distribution(mut self, distribution: NoiseDistribution) -> Self {
        self.distribution = distribution;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::config("noise.scale", "must lie in (0, 1]"));
        }
        self.scale = scale;
        Ok(self)
    }

    /// Declared bound `m̄`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Actual-to-declared ratio `tau`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Largest magnitude any component can take, `tau * m̄`.
    pub fn effective_bound(&self) -> f64 {
        self.scale * self.bound
    }

    pub fn distribution(&self) -> NoiseDistribution {
        self.distribution
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Noise vector `m(k)` of length `p`.
    pub fn sample(&self, k: usize, p: usize) -> DVector<f64> {
        let b = self.effective_bound();
        match self.distribution {
            NoiseDistribution::Off => DVector::zeros(p),
            NoiseDistribution::Uniform => {
                let mut r = seek(self.seed, self.stream, k, p);
                DVector::from_fn(p, |_, _| b * (2.0 * open_unit(&mut r) - 1.0))
            }
            NoiseDistribution::Extremal => {
                let mut r = seek(self.seed, self.stream, k, p);
                DVector::from_fn(p, |_, _| if r.next_u64() >> 63 == 0 { b } else { -b })
            }
        }
    }
}

/// Positions `r` at the first of the `per_step` words reserved for step `k`.
fn seek(seed: u64, stream: u64, k: usize, per_step: usize) -> ChaCha8Rng {
    let mut r = rng::stream(seed, stream);
    // one u64 draw consumes two 32-bit words
    r.set_word_pos(2 * (k as u128) * (per_step as u128));
    r
}

/// Uniform on the open interval `(0, 1)`.
fn open_unit(r: &mut impl RngCore) -> f64 {
    ((r.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Time profile of the attack on one sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSignal {
    /// i.i.d. uniform on the open interval `(low, high)`.
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
    /// `start + slope * (k - onset)` for `k >= onset`, clamped to
    /// `[-limit, limit]` when a limit is given.
    Ramp {
        #[serde(default)]
        start: f64,
        slope: f64,
        #[serde(default)]
        onset: usize,
        #[serde(default)]
        limit: Option<f64>,
    },
}

impl AttackSignal {
    pub fn validate(&self, path: &str) -> Result<()> {
        let ok = match *self {
            AttackSignal::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            AttackSignal::Constant { value } => value.is_finite(),
            AttackSignal::Ramp {
                start,
                slope,
                limit,
                ..
            } => {
                start.is_finite()
                    && slope.is_finite()
                    && limit.is_none_or(|l| l.is_finite() && l >= 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(path, "invalid attack signal parameters"))
        }
    }

    /// Largest `|a_i(k)|` the signal can produce, if bounded.
    pub fn magnitude_bound(&self) -> Option<f64> {
        match *self {
            AttackSignal::Uniform { low, high } => Some(low.abs().max(high.abs())),
            AttackSignal::Constant { value } => Some(value.abs()),
            AttackSignal::Ramp { slope, limit, start, .. } => {
                if slope == 0.0 {
                    Some(limit.map_or(start.abs(), |l| start.abs().min(l)))
                } else {
                    limit
                }
            }
        }
    }

    fn value(&self, k: usize, r: &mut impl RngCore) -> f64 {
        match *self {
            AttackSignal::Uniform { low, high } => low + (high - low) * open_unit(r),
            AttackSignal::Constant { value } => value,
            AttackSignal::Ramp {
                start,
                slope,
                onset,
                limit,
            } => {
                if k < onset {
                    0.0
                } else {
                    let v = start + slope * (k - onset) as f64;
                    match limit {
                        Some(l) => v.clamp(-l, l),
                        None => v,
                    }
                }
            }
        }
    }
}

/// Attacked sensor set `W` with one signal per attacked sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackScenario {
    attacked: SensorSet,
    signals: Vec<(usize, AttackSignal)>,
    q: usize,
    seed: u64,
}

impl AttackScenario {
    /// `signals` pairs zero-based sensor indices with their generators. The
    /// attacked set is exactly the set of sensors carrying a signal.
    pub fn new(p: usize, q: usize, signals: Vec<(usize, AttackSignal)>, seed: u64) -> Result<Self> {
        if 2 * q >= p {
            return Err(Error::config(
                "run.q",
                format!("q = {q} must satisfy q < p/2 (p = {p})"),
            ));
        }
        let mut attacked = SensorSet::EMPTY;
        for (pos, (i, s)) in signals.iter().enumerate() {
            if *i >= p {
                return Err(Error::config(
                    format!("attack.signal[{pos}].sensor"),
                    format!("sensor {} outside 1..={p}", i + 1),
                ));
            }
            if attacked.contains(*i) {
                return Err(Error::config(
                    format!("attack.signal[{pos}].sensor"),
                    format!("sensor {} attacked twice", i + 1),
                ));
            }
            s.validate(&format!("attack.signal[{pos}]"))?;
            attacked = attacked.union(SensorSet::from_indices([*i]));
        }
        if attacked.len() > q {
            return Err(Error::config(
                "attack.signal",
                format!("{} sensors attacked but q = {q}", attacked.len()),
            ));
        }
        let mut signals = signals;
        signals.sort_by_key(|(i, _)| *i);
        Ok(AttackScenario {
            attacked,
            signals,
            q,
            seed,
        })
    }

    pub fn none(p: usize, q: usize) -> Result<Self> {
        AttackScenario::new(p, q, Vec::new(), 0)
    }

    pub fn attacked(&self) -> SensorSet {
        self.attacked
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn signals(&self) -> &[(usize, AttackSignal)] {
        &self.signals
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Attack vector `a(k)`; entries outside `W` are exactly zero.
    pub fn sample(&self, k: usize, p: usize) -> DVector<f64> {
        let mut a = DVector::zeros(p);
        for &(i, sig) in &self.signals {
            let mut r = seek(self.seed, rng::ATTACK_BASE + i as u64, k, 1);
            a[i] = sig.value(k, &mut r);
        }
        a
    }
}

/// Input sequence `u(k)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSignal {
    #[default]
    Zero,
    Constant {
        value: Vec<f64>,
    },
    /// Explicit samples; steps past the end hold zero.
    Sequence {
        values: Vec<Vec<f64>>,
    },
}

impl InputSignal {
    pub fn validate(&self, m: usize) -> Result<()> {
        match self {
            InputSignal::Zero => Ok(()),
            InputSignal::Constant { value } => {
                if value.len() != m {
                    Err(Error::config(
                        "input.value",
                        format!("expected {m} entries, got {}", value.len()),
                    ))
                } else {
                    Ok(())
                }
            }
            InputSignal::Sequence { values } => {
                for (k, v) in values.iter().enumerate() {
                    if v.len() != m {
                        return Err(Error::config(
                            format!("input.values[{k}]"),
                            format!("expected {m} entries, got {}", v.len()),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn at(&self, k: usize, m: usize) -> DVector<f64> {
        match self {
            InputSignal::Zero => DVector::zeros(m),
            InputSignal::Constant { value } => DVector::from_column_slice(value),
            InputSignal::Sequence { values } => values
                .get(k)
                .map(|v| DVector::from_column_slice(v))
                .unwrap_or_else(|| DVector::zeros(m)),
        }
    }
}

/// Sensor reading `C x + a(k) + m(k)`.
pub fn measure(
    model: &PlantModel,
    x: &DVector<f64>,
    attack: &AttackScenario,
    noise: &NoiseModel,
    k: usize,
) -> Result<DVector<f64>> {
    model.check_state(x)?;
    let p = model.p();
    Ok(model.output(x) + attack.sample(k, p) + noise.sample(k, p))
}

/// The nonlinear benchmark plant with a double integrator core and a sine
/// coupling through `x1 + x2`, sampled with step `delta` and nonlinearity
/// amplitude `alpha`.
pub fn benchmark_plant(delta: f64, alpha: f64) -> PlantModel {
    PlantModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, delta, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.5 * delta * alpha, delta * alpha]),
        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        DMatrix::from_row_slice(4, 2, &[3.0, 0.3, 3.0, 0.6, 6.0, 0.9, 1.2, 12.0]),
        DMatrix::from_row_slice(2, 1, &[delta, delta]),
        Nonlinearity::Sine {
            amplitude: 1.0,
            frequency: 1.0,
        },
    )
    .expect("benchmark matrices are consistent")
}
