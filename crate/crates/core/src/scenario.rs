//! Scenario files.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! name = "example1_detect_c07"
//!
//! [dimensions]
//! n = 2
//! r = 1
//! p = 4
//! m = 1
//!
//! [matrices]            # row-major, one inner list per row
//! A = [[1.0, 0.1], [0.0, 1.0]]
//! G = [[0.05], [0.1]]
//! H = [[1.0, 1.0]]
//! C = [[3.0, 0.3], [3.0, 0.6], [6.0, 0.9], [1.2, 12.0]]
//! B = [[0.1], [0.1]]
//!
//! [nonlinearity]
//! kind = "sine"
//! amplitude = 1.0
//! frequency = 1.0
//!
//! [noise]
//! bound = 0.5           # m̄
//! scale = 1.0           # tau, actual noise lies in (-tau*m̄, tau*m̄)
//! distribution = "uniform"
//!
//! [[attack.signal]]
//! sensor = 2            # 1-based
//! kind = "uniform"
//! low = -0.7
//! high = 0.7
//!
//! [input]
//! kind = "zero"
//!
//! [initial]
//! state = { kind = "standard_normal" }
//! observer = { kind = "exact" }
//!
//! [run]
//! horizon = 1000
//! q = 1
//! window = 100
//! seed = 1
//!
//! [files]               # optional, relative to the scenario file
//! gains = "example1_gains.toml"
//! certificates = "example1_certificates.toml"
//!
//! [certification]       # optional, see CertificationConfig
//! trials = 200
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::certify::CertificationConfig;
use crate::error::{Error, Result};
use crate::model::{
    AttackScenario, AttackSignal, InputSignal, NoiseDistribution, NoiseModel, Nonlinearity,
    PlantModel,
};
use crate::rng;
use crate::sim::{ObserverStart, TrajectorySetup};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    description: Option<String>,
    dimensions: RawDimensions,
    matrices: RawMatrices,
    nonlinearity: Nonlinearity,
    noise: RawNoise,
    #[serde(default)]
    attack: RawAttack,
    #[serde(default)]
    input: InputSignal,
    #[serde(default)]
    initial: RawInitial,
    run: RawRun,
    #[serde(default)]
    files: RawFiles,
    #[serde(default)]
    certification: CertificationConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDimensions {
    n: usize,
    r: usize,
    p: usize,
    #[serde(default = "one")]
    m: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct RawMatrices {
    A: Vec<Vec<f64>>,
    G: Vec<Vec<f64>>,
    H: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
    #[serde(default)]
    B: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    bound: f64,
    #[serde(default = "unit_scale")]
    scale: f64,
    #[serde(default)]
    distribution: NoiseDistribution,
}

fn unit_scale() -> f64 {
    1.0
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    #[serde(default)]
    signal: Vec<RawSignal>,
}

#[derive(Debug, Deserialize)]
struct RawSignal {
    sensor: usize,
    #[serde(flatten)]
    signal: AttackSignal,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    #[serde(default)]
    state: InitialState,
    #[serde(default)]
    observer: ObserverInit,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    horizon: usize,
    q: usize,
    window: usize,
    #[serde(default, with = "rng::seed_serde")]
    seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFiles {
    gains: Option<PathBuf>,
    certificates: Option<PathBuf>,
}

/// Initial plant state.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// Independent standard normal entries drawn from the run seed.
    #[default]
    StandardNormal,
    Fixed { value: Vec<f64> },
}

/// Initial bank estimates.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObserverInit {
    /// `x̂(0) = x(0)` for every member.
    #[default]
    Exact,
    /// `x̂(0) = x(0) + offset` for every member.
    Offset { offset: Vec<f64> },
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: Option<String>,
    pub model: PlantModel,
    pub q: usize,
    pub noise: NoiseModel,
    pub attack: AttackScenario,
    pub input: InputSignal,
    pub initial_state: InitialState,
    pub observer_init: ObserverInit,
    pub horizon: usize,
    pub window: usize,
    pub seed: u64,
    pub certification: CertificationConfig,
    /// Resolved against the scenario's directory.
    pub gains_path: Option<PathBuf>,
    pub certificates_path: Option<PathBuf>,
}

fn matrix(path: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::config(
            path,
            format!("expected {nrows} rows, got {}", rows.len()),
        ));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::config(
                format!("{path}[{}]", i + 1),
                format!("row {} has {} entries, expected {ncols}", i + 1, row.len()),
            ));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(
                format!("{path}[{}][{}]", i + 1, j + 1),
                "entry is not finite",
            ));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn positive(path: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(path, "must be >= 1"))
    } else {
        Ok(())
    }
}

impl Scenario {
    /// Parses and validates scenario text. `base` resolves relative file
    /// references.
    pub fn parse(text: &str, file: &str, base: Option<&Path>) -> Result<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| Error::Parse {
            file: file.to_string(),
            message: e.to_string().trim_end().to_string(),
        })?;
        Self::from_raw(raw, base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), path.parent())
    }

    fn from_raw(raw: RawScenario, base: Option<&Path>) -> Result<Self> {
        if raw.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        let d = &raw.dimensions;
        positive("dimensions.n", d.n)?;
        positive("dimensions.r", d.r)?;
        positive("dimensions.p", d.p)?;
        positive("dimensions.m", d.m)?;
        if d.p > 63 {
            return Err(Error::config("dimensions.p", "at most 63 sensors are supported"));
        }
        let m = &raw.matrices;
        let a = matrix("matrices.A", &m.A, d.n, d.n)?;
        let g = matrix("matrices.G", &m.G, d.n, d.r)?;
        let h = matrix("matrices.H", &m.H, d.r, d.n)?;
        let c = matrix("matrices.C", &m.C, d.p, d.n)?;
        let b = match &m.B {
            Some(rows) => matrix("matrices.B", rows, d.n, d.m)?,
            None => DMatrix::zeros(d.n, d.m),
        };
        raw.nonlinearity.validate("nonlinearity")?;
        let model = PlantModel::new(a, g, h, c, b, raw.nonlinearity)?;

        positive("run.horizon", raw.run.horizon)?;
        positive("run.window", raw.run.window)?;
        let q = raw.run.q;
        let seed = raw.run.seed;

        let noise = NoiseModel::new(
            raw.noise.bound,
            raw.noise.scale,
            raw.noise.distribution,
            seed,
        )?;

        let mut signals = Vec::with_capacity(raw.attack.signal.len());
        for (pos, s) in raw.attack.signal.iter().enumerate() {
            if s.sensor == 0 || s.sensor > d.p {
                return Err(Error::config(
                    format!("attack.signal[{pos}].sensor"),
                    format!("sensor {} outside 1..={}", s.sensor, d.p),
                ));
            }
            signals.push((s.sensor - 1, s.signal));
        }
        let attack = AttackScenario::new(d.p, q, signals, seed)?;

        raw.input.validate(d.m)?;

        if let InitialState::Fixed { value } = &raw.initial.state {
            check_vector("initial.state.value", value, d.n)?;
        }
        raw.certification.validate()?;
        if let ObserverInit::Offset { offset } = &raw.initial.observer {
            check_vector("initial.observer.offset", offset, d.n)?;
            let norm = DVector::from_column_slice(offset).norm();
            if norm > raw.certification.init_error_radius {
                return Err(Error::config(
                    "certification.init_error_radius",
                    format!(
                        "observer offset has norm {norm} but the certified radius is {}",
                        raw.certification.init_error_radius
                    ),
                ));
            }
        }

        let resolve = |p: Option<PathBuf>| {
            p.map(|p| match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        };

        Ok(Scenario {
            name: raw.name,
            description: raw.description,
            model,
            q,
            noise,
            attack,
            input: raw.input,
            initial_state: raw.initial.state,
            observer_init: raw.initial.observer,
            horizon: raw.run.horizon,
            window: raw.run.window,
            seed,
            certification: raw.certification,
            gains_path: resolve(raw.files.gains),
            certificates_path: resolve(raw.files.certificates),
        })
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        positive("--horizon", horizon)?;
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_window(mut self, window: usize) -> Result<Self> {
        positive("--N", window)?;
        self.window = window;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Sets the actual-to-declared noise ratio `tau`.
    pub fn with_noise_scale(mut self, tau: f64) -> Result<Self> {
        self.noise = self
            .noise
            .with_scale(tau)
            .map_err(|_| Error::config("--tau", "must lie in (0, 1]"))?;
        Ok(self)
    }

    pub fn with_safety_factor(mut self, factor: f64) -> Result<Self> {
        self.certification.safety_factor = factor;
        self.certification
            .validate()
            .map_err(|_| Error::config("--safety-factor", "must be finite and >= 1"))?;
        Ok(self)
    }

    /// Replaces the attack signals, keeping `p` and `q`.
    pub fn with_attack(mut self, signals: Vec<(usize, AttackSignal)>) -> Result<Self> {
        self.attack = AttackScenario::new(self.model.p(), self.q, signals, self.seed)?;
        Ok(self)
    }

    /// Initial plant state for `seed`.
    pub fn initial_state(&self, seed: u64) -> DVector<f64> {
        match &self.initial_state {
            InitialState::Fixed { value } => DVector::from_column_slice(value),
            InitialState::StandardNormal => {
                let mut r = rng::stream(seed, rng::INITIAL_STATE);
                DVector::from_fn(self.model.n(), |_, _| StandardNormal.sample(&mut r))
            }
        }
    }

    /// Noise, attack and initial conditions for one run under `seed`.
    pub fn trajectory_setup(&self, seed: u64, bank_len: usize) -> Result<TrajectorySetup> {
        let x0 = self.initial_state(seed);
        let observer_start = match &self.observer_init {
            ObserverInit::Exact => ObserverStart::Exact,
            ObserverInit::Offset { offset } => {
                let xhat0 = &x0 + DVector::from_column_slice(offset);
                ObserverStart::PerMember(vec![xhat0; bank_len])
            }
        };
        Ok(TrajectorySetup {
            noise: self.noise.with_stream(seed, rng::NOISE),
            attack: self.attack.clone().with_seed(seed),
            input: self.input.clone(),
            x0,
            observer_start,
            horizon: self.horizon,
        })
    }
}

fn check_vector(path: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::config(
            path,
            format!("expected {n} entries, got {}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::config(path, "entries must be finite"));
    }
    Ok(())
}
