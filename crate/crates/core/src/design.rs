//! Randomized search for observer gains.
//!
//! Each bank member starts from a set of structured guesses. One family uses
//! `K = -H C_J⁺`, which cancels `H e` inside the nonlinearity when `C_J` has
//! full column rank, with `L = -s A C_J⁺` for a few step sizes `s`. The other
//! uses steady-state Riccati predictor gains for `(A, C_J)`. Each `L` is
//! paired with fractions of the cancelling `K`. The best start is then
//! refined by Gaussian perturbations with a shrinking radius. Candidates are
//! scored by the Monte-Carlo noise gain of their certificate. A candidate is
//! discarded when its loop gain against the nonlinearity's slope bound
//! reaches `max_loop_gain`, when it fails to certify, or when it decays
//! slower than `max_lambda`.

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{estimate_certificate, CertificationConfig};
use crate::error::{Error, Result};
use crate::model::{InputSignal, NoiseModel, PlantModel};
use crate::observer::{required_subsets, GainTable, Gains, ObserverSpec, Role};
use crate::rng;
use crate::sensors::{restrict_rows, SensorSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    /// Step sizes `s` tried for `L = -s A C_J⁺`.
    pub step_sizes: Vec<f64>,
    /// Process-noise levels tried for Riccati starting gains.
    pub riccati_levels: Vec<f64>,
    /// Fractions of the cancelling `K` combined with each starting `L`.
    pub cancellation: Vec<f64>,
    /// Largest admissible loop gain, see [`loop_gain`].
    pub max_loop_gain: f64,
    pub rounds: usize,
    pub candidates: usize,
    /// Initial perturbation radius, relative to the gain's norm.
    pub spread: f64,
    pub shrink: f64,
    pub max_lambda: f64,
    /// Certification settings used for scoring.
    pub trials: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            step_sizes: vec![1.0, 0.8, 0.6, 0.4, 0.3, 0.2, 0.1],
            riccati_levels: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5],
            cancellation: vec![1.0, 0.5, 0.0],
            max_loop_gain: 0.95,
            rounds: 6,
            candidates: 24,
            spread: 0.3,
            shrink: 0.6,
            max_lambda: 0.99,
            trials: 40,
            horizon: 1000,
            seed: 0,
        }
    }
}

impl DesignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_sizes.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("design.step_sizes", "values must be finite"));
        }
        if self.riccati_levels.iter().any(|q| !(q.is_finite() && *q > 0.0)) {
            return Err(Error::config("design.riccati_levels", "values must be positive"));
        }
        if self.step_sizes.is_empty() && self.riccati_levels.is_empty() {
            return Err(Error::config("design.step_sizes", "no starting gains configured"));
        }
        if self.cancellation.is_empty() || self.cancellation.iter().any(|b| !b.is_finite()) {
            return Err(Error::config("design.cancellation", "need at least one finite value"));
        }
        if !(self.max_loop_gain > 0.0 && self.max_loop_gain < 1.0) {
            return Err(Error::config("design.max_loop_gain", "must lie in (0, 1)"));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(Error::config("design.spread", "must be >= 0"));
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err(Error::config("design.shrink", "must lie in (0, 1]"));
        }
        if !(self.max_lambda > 0.0 && self.max_lambda < 1.0) {
            return Err(Error::config("design.max_lambda", "must lie in (0, 1)"));
        }
        if self.trials == 0 || self.horizon < 2 {
            return Err(Error::config("design.trials", "need trials >= 1 and horizon >= 2"));
        }
        Ok(())
    }

    fn scoring(&self) -> CertificationConfig {
        CertificationConfig {
            trials: self.trials,
            horizon: self.horizon,
            seed: self.seed,
            ..CertificationConfig::default()
        }
    }
}

/// Best gains found for one subset.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignOutcome {
    pub subset: SensorSet,
    pub gains: Gains,
    pub gamma_raw: f64,
    pub lambda: f64,
}

/// Steady-state predictor gain `L = -A P Cᵀ (C P Cᵀ + R)⁻¹` for process
/// noise `q I` and measurement noise `I`, with `P` from the Riccati iteration.
pub fn riccati_gain(a: &DMatrix<f64>, c: &DMatrix<f64>, q: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let qm = DMatrix::identity(n, n) * q;
    let r = DMatrix::identity(c.nrows(), c.nrows());
    let mut p = DMatrix::identity(n, n);
    let mut gain = DMatrix::zeros(n, c.nrows());
    for _ in 0..100_000 {
        let s = c * &p * c.transpose() + &r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Invariant("innovation covariance is singular".into()))?;
        gain = a * &p * c.transpose() * s_inv;
        let next = a * &p * a.transpose() - &gain * c * &p * a.transpose() + &qm;
        let next = (&next + next.transpose()) * 0.5;
        let change = (&next - &p).norm();
        p = next;
        if change <= 1e-14 * p.norm().max(1.0) {
            break;
        }
    }
    if gain.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("Riccati iteration diverged".into()));
    }
    Ok(-gain)
}

const LOOP_GRID: usize = 2048;

/// Spectral radius of `A + L C_J` and the peak over the unit circle of
/// `L_f ‖(H + K C_J)(zI - A - L C_J)⁻¹ G‖`, where `L_f` bounds the slope of
/// the nonlinearity. With the radius and the loop gain both below one the
/// noiseless error dynamics are globally exponentially stable.
pub fn loop_gain(model: &PlantModel, c_j: &DMatrix<f64>, g: &Gains, grid: usize) -> (f64, f64) {
    let acl = model.a() + &g.l * c_j;
    let radius = acl
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if radius.is_nan() || radius >= 1.0 {
        return (radius, f64::INFINITY);
    }
    let lf = model.nonlinearity().slope_bound();
    let out = (model.h() + &g.k * c_j).map(|v| Complex::new(v, 0.0));
    let gc = model.g().map(|v| Complex::new(v, 0.0));
    let ac = acl.map(|v| Complex::new(v, 0.0));
    let n = acl.nrows();
    let mut peak = 0.0f64;
    for i in 0..=grid {
        let w = std::f64::consts::PI * i as f64 / grid as f64;
        let z = Complex::from_polar(1.0, w);
        let m = DMatrix::<Complex<f64>>::identity(n, n) * z - &ac;
        let Some(inv) = m.try_inverse() else {
            return (radius, f64::INFINITY);
        };
        let t = &out * inv * &gc;
        let sv = t.svd(false, false).singular_values.max();
        peak = peak.max(sv);
    }
    (radius, lf * peak)
}

/// Structured starting gains with step size `s`.
pub fn seed_gains(model: &PlantModel, subset: SensorSet, s: f64) -> Result<Gains> {
    let c_j = restrict_rows(model.c(), subset)?;
    let pinv = c_j
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Invariant(format!("pseudo-inverse of C_{subset}: {e}")))?;
    Ok(Gains {
        k: -(model.h() * &pinv),
        l: -(model.a() * &pinv) * s,
    })
}

#[allow(clippy::too_many_arguments)]
fn score(
    model: &PlantModel,
    subset: SensorSet,
    gains: &Gains,
    noise: &NoiseModel,
    input: &InputSignal,
    scoring: &CertificationConfig,
    member: usize,
    max_lambda: f64,
) -> Option<(f64, f64)> {
    let spec = ObserverSpec::new(model, subset, Role::Full, gains.clone()).ok()?;
    let cert = estimate_certificate(&spec, model, noise, input, scoring, member).ok()?;
    (cert.lambda <= max_lambda && cert.gamma_raw.is_finite()).then_some((cert.gamma_raw, cert.lambda))
}

fn perturb(r: &mut impl Rng, m: &DMatrix<f64>, radius: f64) -> DMatrix<f64> {
    let scale = radius * m.norm().max(1e-3) / (m.len() as f64).sqrt();
    m.map(|v| v + scale * r.sample::<f64, _>(StandardNormal))
}

/// Searches gains for one subset. `member` keys the random streams.
pub fn design_subset(
    model: &PlantModel,
    subset: SensorSet,
    noise: &NoiseModel,
    input: &InputSignal,
    cfg: &DesignConfig,
    member: usize,
) -> Result<DesignOutcome> {
    cfg.validate()?;
    let scoring = cfg.scoring();
    let eval = |g: &Gains| score(model, subset, g, noise, input, &scoring, member, cfg.max_lambda);

    let c_j = restrict_rows(model.c(), subset)?;
    let cancel = seed_gains(model, subset, 0.0)?.k;
    let mut starts = Vec::new();
    for &beta in &cfg.cancellation {
        for &s in &cfg.step_sizes {
            let g = seed_gains(model, subset, s)?;
            starts.push(Gains { k: &cancel * beta, l: g.l });
        }
        for &q in &cfg.riccati_levels {
            let l = riccati_gain(model.a(), &c_j, q)?;
            starts.push(Gains { k: &cancel * beta, l });
        }
    }
    let eval = |g: &Gains| {
        let (radius, gain) = loop_gain(model, &c_j, g, LOOP_GRID);
        if radius >= 1.0 || gain > cfg.max_loop_gain {
            return None;
        }
        eval(g)
    };
    let mut best: Option<(Gains, f64, f64)> = None;
    for g in starts {
        if let Some((gamma, lambda)) = eval(&g) {
            if best.as_ref().is_none_or(|b| gamma < b.1) {
                best = Some((g, gamma, lambda));
            }
        }
    }
    let Some(mut best) = best else {
        return Err(Error::Certification {
            subset: subset.to_string(),
            reason: "no starting gain certifies; try other step sizes".into(),
        });
    };

    let mut radius = cfg.spread;
    for round in 0..cfg.rounds {
        let base = best.0.clone();
        let found: Vec<Option<(Gains, f64, f64)>> = (0..cfg.candidates)
            .into_par_iter()
            .map(|c| {
                let id = round * cfg.candidates + c;
                let mut r = rng::stream(cfg.seed, rng::trial_stream(rng::DESIGN, member, id));
                let g = Gains {
                    k: perturb(&mut r, &base.k, radius),
                    l: perturb(&mut r, &base.l, radius),
                };
                eval(&g).map(|(gamma, lambda)| (g, gamma, lambda))
            })
            .collect();
        for cand in found.into_iter().flatten() {
            if cand.1 < best.1 {
                best = cand;
            }
        }
        radius *= cfg.shrink;
    }
    Ok(DesignOutcome {
        subset,
        gains: best.0,
        gamma_raw: best.1,
        lambda: best.2,
    })
}

/// Gains for every member of the bank for `(p, q)`.
pub fn design_bank(
    model: &PlantModel,
    q: usize,
    noise: &NoiseModel,
    input: &InputSignal,
    cfg: &DesignConfig,
) -> Result<(GainTable, Vec<DesignOutcome>)> {
    let subsets = required_subsets(model.p(), q)?;
    let mut table = GainTable::new();
    let mut outcomes = Vec::with_capacity(subsets.len());
    for (member, (s, _)) in subsets.into_iter().enumerate() {
        let o = design_subset(model, s, noise, input, cfg, member)?;
        table.insert(s, o.gains.clone());
        outcomes.push(o);
    }
    Ok((table, outcomes))
}
