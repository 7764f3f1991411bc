//! Monte-Carlo ISS certificates and the detection/isolation thresholds.
//!
//! A certificate `(c, λ, γ)` for observer `J` asserts
//!
//! ```text
//! |e_J(k)| <= c λ^k |e_J(0)| + γ ‖m_J‖_k
//! ```
//!
//! for attack-free runs, where `e_J = x̂_J - x`, `|·|` is the Euclidean norm
//! and `‖m_J‖_k` is the largest absolute noise component on the sensors of
//! `J` up to step `k`. The same component-wise norm defines the declared
//! noise bound `m̄`, so `‖m_J‖_k <= m̄` always holds.
//!
//! Estimation:
//!
//! 1. Noiseless rollouts from random initial errors. A least-squares line
//!    through `log |e(k)|` over the pre-settling segment gives `λ`; `c` is
//!    then raised until the envelope covers every sample. The maximum `c`
//!    and maximum `λ` across trials are kept.
//! 2. Noisy rollouts. `γ` is the largest ratio `|e(k)| / ‖m‖_k` after the
//!    fitted transient has decayed below `settle_tol`, maximised over trials
//!    and multiplied by the safety factor.
//! 3. Fresh validation rollouts count envelope violations; more than
//!    `max_violation_rate` of all (trial, step) samples fails certification.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputSignal, NoiseDistribution, NoiseModel, PlantModel};
use crate::observer::{ObserverBank, ObserverSpec};
use crate::rng;
use crate::sensors::{enumerate_subsets, restrict, subsets_within, SensorSet};

const CERT_NOISE: u64 = 0x20;
const VALIDATE_NOISE: u64 = 0x21;

/// Relative error level below which a noiseless rollout counts as settled
/// numerically; samples below it are excluded from the decay fit.
const FIT_FLOOR: f64 = 1e-11;

/// Absolute slack on envelope checks, covering floating-point roundoff.
const ENVELOPE_SLACK: f64 = 1e-12;

/// Knobs of the Monte-Carlo certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificationConfig {
    pub trials: usize,
    pub horizon: usize,
    pub safety_factor: f64,
    /// Initial-error radius used when fitting `(c, λ)`.
    pub fit_error_radius: f64,
    /// Radius of the initial-error ball the certificate must cover during
    /// runs; zero when observers start at the true state.
    pub init_error_radius: f64,
    /// Transient tolerance `ε`.
    pub epsilon: f64,
    /// Transient level treated as settled when estimating `γ`.
    pub settle_tol: f64,
    /// Standard deviation of the random initial plant state.
    pub state_spread: f64,
    /// Noise laws cycled through the trials.
    pub noise_mix: Vec<NoiseDistribution>,
    pub validation_trials: usize,
    pub max_violation_rate: f64,
    #[serde(with = "rng::seed_serde")]
    pub seed: u64,
}

impl Default for CertificationConfig {
    fn default() -> Self {
        CertificationConfig {
            trials: 200,
            horizon: 1000,
            safety_factor: 1.2,
            fit_error_radius: 1.0,
            init_error_radius: 0.0,
            epsilon: 0.0,
            settle_tol: 1e-9,
            state_spread: 1.0,
            noise_mix: vec![NoiseDistribution::Uniform],
            validation_trials: 100,
            max_violation_rate: 0.01,
            seed: 0,
        }
    }
}

impl CertificationConfig {
    pub fn validate(&self) -> Result<()> {
        let p = "certification";
        if self.trials == 0 {
            return Err(Error::config(format!("{p}.trials"), "must be >= 1"));
        }
        if self.horizon < 2 {
            return Err(Error::config(format!("{p}.horizon"), "must be >= 2"));
        }
        if !(self.safety_factor.is_finite() && self.safety_factor >= 1.0) {
            return Err(Error::config(format!("{p}.safety_factor"), "must be >= 1"));
        }
        if !(self.fit_error_radius.is_finite() && self.fit_error_radius > 0.0) {
            return Err(Error::config(format!("{p}.fit_error_radius"), "must be positive"));
        }
        if !(self.init_error_radius.is_finite() && self.init_error_radius >= 0.0) {
            return Err(Error::config(format!("{p}.init_error_radius"), "must be >= 0"));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config(format!("{p}.epsilon"), "must be >= 0"));
        }
        if self.init_error_radius > 0.0 && self.epsilon == 0.0 {
            return Err(Error::config(
                format!("{p}.epsilon"),
                "must be positive when observers start away from the plant state",
            ));
        }
        if !(self.settle_tol.is_finite() && self.settle_tol > 0.0) {
            return Err(Error::config(format!("{p}.settle_tol"), "must be positive"));
        }
        if !(self.state_spread.is_finite() && self.state_spread >= 0.0) {
            return Err(Error::config(format!("{p}.state_spread"), "must be >= 0"));
        }
        if self.noise_mix.is_empty() {
            return Err(Error::config(format!("{p}.noise_mix"), "must not be empty"));
        }
        if !(0.0..1.0).contains(&self.max_violation_rate) {
            return Err(Error::config(format!("{p}.max_violation_rate"), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// ISS constants for one observer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssCertificate {
    /// One-based sensor indices.
    pub subset: Vec<usize>,
    pub c: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// `γ` before the safety factor.
    pub gamma_raw: f64,
    pub epsilon: f64,
    pub k_star: usize,
    pub init_error_radius: f64,
    #[serde(with = "rng::seed_serde")]
    pub master_seed: u64,
    pub trials: usize,
    pub horizon: usize,
    pub safety_factor: f64,
}

impl IssCertificate {
    pub fn sensor_set(&self, p: usize) -> Result<SensorSet> {
        SensorSet::from_one_based(&self.subset, p, "certificate.subset")
    }

    /// Right-hand side of the ISS bound at step `k`.
    pub fn envelope(&self, k: usize, e0: f64, noise_sup: f64) -> f64 {
        self.c * self.lambda.powi(k.min(i32::MAX as usize) as i32) * e0 + self.gamma * noise_sup
    }

    pub fn validate(&self) -> Result<()> {
        let path = format!("certificate[{:?}]", self.subset);
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::config(format!("{path}.c"), "must be positive"));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::config(format!("{path}.lambda"), "must lie in (0, 1)"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config(format!("{path}.gamma"), "must be >= 0"));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config(format!("{path}.epsilon"), "must be >= 0"));
        }
        if self.init_error_radius > 0.0 {
            let tail = self.c * self.lambda.powi(self.k_star as i32) * self.init_error_radius;
            if tail > self.epsilon * (1.0 + 1e-12) {
                return Err(Error::config(
                    format!("{path}.k_star"),
                    "transient at k_star exceeds epsilon",
                ));
            }
        } else if self.k_star != 0 {
            return Err(Error::config(
                format!("{path}.k_star"),
                "must be 0 when the initial-error radius is 0",
            ));
        }
        Ok(())
    }
}

/// Certificates keyed by subset.
pub type CertificateTable = BTreeMap<SensorSet, IssCertificate>;

/// Smallest `k` with `c λ^k r <= ε`.
pub fn settling_step(c: f64, lambda: f64, radius: f64, epsilon: f64) -> Option<usize> {
    if radius == 0.0 {
        return Some(0);
    }
    if epsilon <= 0.0 || !(lambda > 0.0 && lambda < 1.0) {
        return None;
    }
    let start = c * radius;
    if start <= epsilon {
        return Some(0);
    }
    let mut k = ((epsilon / start).ln() / lambda.ln()).ceil().max(0.0) as usize;
    // step back or forward over rounding in the closed form
    while k > 0 && c * lambda.powi(k as i32 - 1) * radius <= epsilon {
        k -= 1;
    }
    while c * lambda.powi(k as i32) * radius > epsilon {
        k += 1;
    }
    Some(k)
}

struct Rollout {
    /// `|e(k)|` for `k = 0..=horizon`.
    err: Vec<f64>,
    /// `‖m_J‖_k` for `k = 0..=horizon` (sup up to and including step k).
    noise_sup: Vec<f64>,
}

/// Simulates plant and one observer for `horizon` steps without attacks.
fn rollout(
    model: &PlantModel,
    spec: &ObserverSpec,
    input: &InputSignal,
    x0: DVector<f64>,
    xhat0: DVector<f64>,
    noise: Option<&NoiseModel>,
    horizon: usize,
) -> Rollout {
    let p = model.p();
    let m = model.m();
    let subset = spec.subset();
    let mut x = x0;
    let mut xhat = xhat0;
    let mut err = Vec::with_capacity(horizon + 1);
    let mut noise_sup = Vec::with_capacity(horizon + 1);
    let mut sup = 0.0f64;
    for k in 0..=horizon {
        err.push((&xhat - &x).norm());
        let mk = noise.map(|n| n.sample(k, p));
        // ‖m‖_k is the sup over steps 0..=k
        if let Some(mk) = &mk {
            for i in subset.indices() {
                sup = sup.max(mk[i].abs());
            }
        }
        noise_sup.push(sup);
        if k == horizon {
            break;
        }
        let u = input.at(k, m);
        let mut y = model.output(&x);
        if let Some(mk) = mk {
            y += mk;
        }
        let y_j = restrict(&y, subset).expect("subset validated at bank construction");
        let next_hat = spec.step_restricted(model, &xhat, &y_j, &u);
        x = model.step_unchecked(&x, &u);
        xhat = next_hat;
        if !err.last().is_some_and(|e| e.is_finite()) {
            break;
        }
    }
    Rollout { err, noise_sup }
}

fn random_direction(r: &mut impl Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn random_state(r: &mut impl Rng, n: usize, spread: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| spread * r.sample::<f64, _>(StandardNormal))
}

/// Decay fit of one noiseless rollout: returns `(c, λ)`.
fn fit_decay(err: &[f64]) -> std::result::Result<(f64, f64), String> {
    let e0 = err[0];
    if err.iter().any(|e| !e.is_finite()) {
        return Err("error trajectory is not finite".into());
    }
    let peak = err.iter().cloned().fold(0.0, f64::max);
    if peak > 1e6 * e0 {
        return Err(format!("error grew from {e0:.3e} to {peak:.3e}"));
    }
    let floor = FIT_FLOOR * e0;
    let seg_end = err.iter().position(|&e| e <= floor).unwrap_or(err.len());
    let seg = &err[..seg_end];
    if seg_end == err.len() {
        // never reached the floor: require the tail to be below the start
        let tail = err[err.len() - 1];
        if tail >= e0 {
            return Err(format!("no decay: |e(0)| = {e0:.3e}, |e(end)| = {tail:.3e}"));
        }
    }
    let lambda = if seg.len() >= 3 {
        let n = seg.len() as f64;
        let (sx, sy, sxx, sxy) = seg.iter().enumerate().fold(
            (0.0, 0.0, 0.0, 0.0),
            |(sx, sy, sxx, sxy), (k, e)| {
                let (x, y) = (k as f64, e.ln());
                (sx + x, sy + y, sxx + x * x, sxy + x * y)
            },
        );
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        slope.exp()
    } else {
        // collapsed within two steps
        (seg.last().copied().unwrap_or(floor) / e0).max(FIT_FLOOR)
    };
    if !(lambda.is_finite() && lambda < 1.0) {
        return Err(format!("fitted decay rate {lambda:.6} is not below 1"));
    }
    let lambda = lambda.max(f64::MIN_POSITIVE);
    let mut c = 1.0f64;
    for (k, &e) in seg.iter().enumerate() {
        let env = lambda.powi(k as i32) * e0;
        if env > 0.0 {
            c = c.max(e / env);
        }
    }
    Ok((c, lambda))
}

/// Outcome of a validation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationReport {
    pub samples: usize,
    pub violations: usize,
}

impl ValidationReport {
    pub fn rate(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.violations as f64 / self.samples as f64
        }
    }
}

/// Estimates `(c, λ, γ, k*)` for one observer.
///
/// `member` selects the random streams so different bank members see
/// independent trials under one master seed.
pub fn estimate_certificate(
    spec: &ObserverSpec,
    model: &PlantModel,
    noise: &NoiseModel,
    input: &InputSignal,
    cfg: &CertificationConfig,
    member: usize,
) -> Result<IssCertificate> {
    cfg.validate()?;
    let n = model.n();
    let fail = |reason: String| Error::Certification {
        subset: spec.subset().to_string(),
        reason,
    };

    // 1. decay envelope from noiseless rollouts
    let fits: Vec<std::result::Result<(f64, f64), String>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(cfg.seed, rng::trial_stream(rng::CERT, member, t));
            let x0 = random_state(&mut r, n, cfg.state_spread);
            let radius = cfg.fit_error_radius * (0.1 + 0.9 * rng::unit(&mut r));
            let e0 = random_direction(&mut r, n) * radius;
            let xhat0 = &x0 + e0;
            let ro = rollout(model, spec, input, x0, xhat0, None, cfg.horizon);
            fit_decay(&ro.err).map_err(|e| format!("trial {t}: {e}"))
        })
        .collect();
    let mut c = 0.0f64;
    let mut lambda = 0.0f64;
    for f in fits {
        let (ct, lt) = f.map_err(fail)?;
        c = c.max(ct);
        lambda = lambda.max(lt);
    }

    // 2. noise gain
    let gammas: Vec<std::result::Result<f64, String>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(cfg.seed, rng::trial_stream(rng::CERT, member, t));
            // skip the draws used by the fit phase
            let _ = random_state(&mut r, n, cfg.state_spread);
            let _ = rng::unit(&mut r);
            let _ = random_direction(&mut r, n);
            let x0 = random_state(&mut r, n, cfg.state_spread);
            let e0 = random_direction(&mut r, n) * (cfg.init_error_radius * rng::unit(&mut r));
            let e0_norm = e0.norm();
            let xhat0 = &x0 + e0;
            let dist = cfg.noise_mix[t % cfg.noise_mix.len()];
            let nm = noise
                .with_distribution(dist)
                .with_stream(cfg.seed, rng::trial_stream(CERT_NOISE, member, t));
            let ro = rollout(model, spec, input, x0, xhat0, Some(&nm), cfg.horizon);
            if ro.err.iter().any(|e| !e.is_finite()) {
                return Err(format!("trial {t}: error trajectory is not finite"));
            }
            let settle = if e0_norm == 0.0 {
                0
            } else {
                settling_step(c, lambda, e0_norm, cfg.settle_tol).unwrap_or(cfg.horizon)
            };
            let mut g = 0.0f64;
            for k in settle..ro.err.len() {
                let s = ro.noise_sup[k];
                if s > 0.0 {
                    g = g.max(ro.err[k] / s);
                }
            }
            Ok(g)
        })
        .collect();
    let mut gamma_raw = 0.0f64;
    for g in gammas {
        gamma_raw = gamma_raw.max(g.map_err(fail)?);
    }
    let gamma = gamma_raw * cfg.safety_factor;
    let k_star = settling_step(c, lambda, cfg.init_error_radius, cfg.epsilon)
        .ok_or_else(|| fail("cannot settle within epsilon".into()))?;

    let cert = IssCertificate {
        subset: spec.subset().one_based(),
        c,
        lambda,
        gamma,
        gamma_raw,
        epsilon: cfg.epsilon,
        k_star,
        init_error_radius: cfg.init_error_radius,
        master_seed: cfg.seed,
        trials: cfg.trials,
        horizon: cfg.horizon,
        safety_factor: cfg.safety_factor,
    };
    cert.validate()?;
    Ok(cert)
}

/// Re-runs fresh attack-free rollouts and counts samples outside the
/// certificate's envelope.
pub fn validate_certificate(
    spec: &ObserverSpec,
    model: &PlantModel,
    noise: &NoiseModel,
    input: &InputSignal,
    cert: &IssCertificate,
    cfg: &CertificationConfig,
    member: usize,
) -> ValidationReport {
    let n = model.n();
    let radius = cfg.fit_error_radius.max(cfg.init_error_radius);
    let counts: Vec<(usize, usize)> = (0..cfg.validation_trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(cfg.seed, rng::trial_stream(rng::VALIDATE, member, t));
            let x0 = random_state(&mut r, n, cfg.state_spread);
            // half the trials start exactly on the plant state
            let e0 = if t % 2 == 0 {
                DVector::zeros(n)
            } else {
                random_direction(&mut r, n) * (radius * rng::unit(&mut r))
            };
            let e0_norm = e0.norm();
            let xhat0 = &x0 + e0;
            let dist = cfg.noise_mix[t % cfg.noise_mix.len()];
            let nm = noise
                .with_distribution(dist)
                .with_stream(cfg.seed, rng::trial_stream(VALIDATE_NOISE, member, t));
            let ro = rollout(model, spec, input, x0, xhat0, Some(&nm), cfg.horizon);
            let mut viol = 0;
            for (k, (&e, &s)) in ro.err.iter().zip(&ro.noise_sup).enumerate() {
                if !e.is_finite() || e > cert.envelope(k, e0_norm, s) + ENVELOPE_SLACK {
                    viol += 1;
                }
            }
            // a diverged rollout counts every missing step as a violation
            viol += cfg.horizon + 1 - ro.err.len();
            (cfg.horizon + 1, viol)
        })
        .collect();
    let (samples, violations) = counts
        .into_iter()
        .fold((0, 0), |(s, v), (a, b)| (s + a, v + b));
    ValidationReport {
        samples,
        violations,
    }
}

/// Certifies every member of the bank and validates each certificate.
pub fn certify_bank(
    bank: &ObserverBank,
    model: &PlantModel,
    noise: &NoiseModel,
    input: &InputSignal,
    cfg: &CertificationConfig,
) -> Result<(CertificateTable, Vec<ValidationReport>)> {
    cfg.validate()?;
    let mut table = CertificateTable::new();
    let mut reports = Vec::with_capacity(bank.len());
    for (idx, spec) in bank.members().iter().enumerate() {
        let cert = estimate_certificate(spec, model, noise, input, cfg, idx)?;
        let report = validate_certificate(spec, model, noise, input, &cert, cfg, idx);
        if report.rate() >= cfg.max_violation_rate {
            return Err(Error::Certification {
                subset: spec.subset().to_string(),
                reason: format!(
                    "validation rollouts violate the envelope in {} of {} samples ({:.3}%)",
                    report.violations,
                    report.samples,
                    100.0 * report.rate()
                ),
            });
        }
        table.insert(spec.subset(), cert);
        reports.push(report);
    }
    Ok((table, reports))
}

/// Detection and isolation thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub epsilon: f64,
    pub noise_bound: f64,
    /// `z̄ = 2(ε + γ̄ m̄)`.
    pub z_bar: f64,
    /// `γ̄`: max of the full-set gain and every `p - q` gain.
    pub gamma_bar: f64,
    /// `z̄_J = 2(ε + γ'_J m̄)` for every `p - q` subset.
    pub z_bar_j: BTreeMap<SensorSet, f64>,
    /// `γ'_J`: max of `γ_J` and `γ_S` over `S ⊂ J` with `card(S) = p - 2q`.
    pub gamma_prime_j: BTreeMap<SensorSet, f64>,
    /// `k⋆ = max{k*, k*_J}`.
    pub k_star_detect: usize,
    /// `k̄* = max{k*_J, k*_S}`.
    pub k_star_isolate: usize,
}

/// Builds thresholds from a certificate table covering the whole bank.
pub fn compute_thresholds(
    certs: &CertificateTable,
    p: usize,
    q: usize,
    noise_bound: f64,
    epsilon: f64,
) -> Result<ThresholdSet> {
    if !(noise_bound.is_finite() && noise_bound > 0.0) {
        return Err(Error::config("noise.bound", "must be positive"));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::config("epsilon", "must be >= 0"));
    }
    let required = crate::observer::required_subsets(p, q)?;
    let missing: Vec<String> = required
        .iter()
        .filter(|(s, _)| !certs.contains_key(s))
        .map(|(s, _)| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCertificates(missing));
    }
    let full = &certs[&SensorSet::full(p)];
    let detection: Vec<SensorSet> = if q == 0 {
        Vec::new()
    } else {
        enumerate_subsets(p, p - q)?
    };

    let mut gamma_bar = full.gamma;
    let mut k_star_detect = full.k_star;
    let mut k_star_isolate = 0usize;
    let mut z_bar_j = BTreeMap::new();
    let mut gamma_prime_j = BTreeMap::new();
    for j in &detection {
        let cj = &certs[j];
        gamma_bar = gamma_bar.max(cj.gamma);
        k_star_detect = k_star_detect.max(cj.k_star);
        k_star_isolate = k_star_isolate.max(cj.k_star);
        let mut gp = cj.gamma;
        for s in subsets_within(*j, p - 2 * q) {
            let cs = &certs[&s];
            gp = gp.max(cs.gamma);
            k_star_isolate = k_star_isolate.max(cs.k_star);
        }
        gamma_prime_j.insert(*j, gp);
        z_bar_j.insert(*j, 2.0 * (epsilon + gp * noise_bound));
    }
    Ok(ThresholdSet {
        epsilon,
        noise_bound,
        z_bar: 2.0 * (epsilon + gamma_bar * noise_bound),
        gamma_bar,
        z_bar_j,
        gamma_prime_j,
        k_star_detect,
        k_star_isolate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Nonlinearity;
    use crate::observer::{required_subsets, Gains, Role};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn cert(subset: SensorSet, gamma: f64, k_star: usize) -> IssCertificate {
        IssCertificate {
            subset: subset.one_based(),
            c: 1.0,
            lambda: 0.5,
            gamma,
            gamma_raw: gamma,
            epsilon: 0.0,
            k_star,
            init_error_radius: 0.0,
            master_seed: 0,
            trials: 1,
            horizon: 10,
            safety_factor: 1.0,
        }
    }

    fn table(p: usize, q: usize, gamma: impl Fn(SensorSet) -> f64) -> CertificateTable {
        required_subsets(p, q)
            .unwrap()
            .into_iter()
            .map(|(s, _)| (s, cert(s, gamma(s), 0)))
            .collect()
    }

    fn set(one_based: &[usize]) -> SensorSet {
        SensorSet::from_indices(one_based.iter().map(|i| i - 1))
    }

    /// Scalar plant `x+ = 0.5 x` read by one sensor `y = x`, observed with
    /// `L = 0`. The error obeys `e+ = 0.5 e` exactly, noise-free.
    fn scalar_open_loop() -> (PlantModel, ObserverSpec) {
        let m = PlantModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            Nonlinearity::Zero,
        )
        .unwrap();
        let spec = ObserverSpec::new(&m, SensorSet::full(1), Role::Full, Gains::zero(1, 1, 1)).unwrap();
        (m, spec)
    }

    /// Scalar plant `x+ = 1.5 x`, `y = x`, observed with `L = -1`, so the
    /// error obeys `e+ = 0.5 e + m` exactly. Tests pin `x(0) = 0` so the
    /// unstable plant stays at rest.
    fn scalar_unit_noise() -> (PlantModel, ObserverSpec) {
        let m = PlantModel::new(
            DMatrix::from_element(1, 1, 1.5),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            Nonlinearity::Zero,
        )
        .unwrap();
        let gains = Gains {
            k: DMatrix::zeros(1, 1),
            l: DMatrix::from_element(1, 1, -1.0),
        };
        let spec = ObserverSpec::new(&m, SensorSet::full(1), Role::Full, gains).unwrap();
        (m, spec)
    }

    #[test]
    fn settling_step_examples() {
        assert_eq!(settling_step(2.0, 0.5, 0.0, 0.0), Some(0));
        assert_eq!(settling_step(2.0, 0.5, 1.0, 0.25), Some(3));
        assert_eq!(settling_step(1.0, 0.5, 1.0, 1.0), Some(0));
        assert_eq!(settling_step(1.0, 0.5, 1.0, 0.0), None);
    }

    #[test]
    fn decay_fit_recovers_geometric_rate() {
        let err: Vec<f64> = (0..60).map(|k| 3.0 * 0.7f64.powi(k)).collect();
        let (c, l) = fit_decay(&err).unwrap();
        assert!((l - 0.7).abs() < 1e-9);
        assert!((c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decay_fit_rejects_growth() {
        let err: Vec<f64> = (0..60).map(|k| 1.01f64.powi(k)).collect();
        assert!(fit_decay(&err).is_err());
    }

    #[test]
    fn open_loop_contraction_certificate() {
        let (m, spec) = scalar_open_loop();
        let noise = NoiseModel::new(0.5, 1.0, NoiseDistribution::Uniform, 1).unwrap();
        let cfg = CertificationConfig {
            trials: 8,
            horizon: 200,
            ..Default::default()
        };
        let c = estimate_certificate(&spec, &m, &noise, &InputSignal::Zero, &cfg, 0).unwrap();
        assert!((c.lambda - 0.5).abs() < 1e-6, "lambda {}", c.lambda);
        // L = 0: the observer ignores the sensor so noise never enters
        assert_eq!(c.gamma, 0.0);
        assert_eq!(c.k_star, 0);
    }

    #[test]
    fn geometric_series_gain() {
        // e+ = 0.5 e + m with |m| <= m̄ has worst-case gain 1/(1-0.5) = 2;
        // extremal noise of constant sign reaches it after ~50 steps
        let (m, spec) = scalar_unit_noise();
        let noise = NoiseModel::new(0.5, 1.0, NoiseDistribution::Extremal, 2).unwrap();
        let cfg = CertificationConfig {
            trials: 64,
            horizon: 4000,
            safety_factor: 1.2,
            noise_mix: vec![NoiseDistribution::Extremal],
            state_spread: 0.0,
            ..Default::default()
        };
        let c = estimate_certificate(&spec, &m, &noise, &InputSignal::Zero, &cfg, 0).unwrap();
        let tol = 1e-6;
        assert!(c.gamma_raw <= 2.0 + 1e-12, "raw {}", c.gamma_raw);
        assert!(c.gamma >= 2.0 - tol && c.gamma <= 2.0 * 1.2, "gamma {}", c.gamma);
    }

    #[test]
    fn zero_noise_exact_start_gives_zero_gain() {
        let (m, spec) = scalar_unit_noise();
        let noise = NoiseModel::new(0.5, 1.0, NoiseDistribution::Off, 2).unwrap();
        let cfg = CertificationConfig {
            trials: 4,
            horizon: 100,
            noise_mix: vec![NoiseDistribution::Off],
            state_spread: 0.0,
            ..Default::default()
        };
        let c = estimate_certificate(&spec, &m, &noise, &InputSignal::Zero, &cfg, 0).unwrap();
        assert_eq!(c.gamma, 0.0);
        assert_eq!(c.k_star, 0);
    }

    #[test]
    fn divergent_observer_fails_with_subset_name() {
        let m = PlantModel::new(
            DMatrix::from_element(1, 1, 1.1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            Nonlinearity::Zero,
        )
        .unwrap();
        let spec = ObserverSpec::new(&m, SensorSet::full(1), Role::Full, Gains::zero(1, 1, 1)).unwrap();
        let noise = NoiseModel::new(0.5, 1.0, NoiseDistribution::Uniform, 2).unwrap();
        let cfg = CertificationConfig {
            trials: 2,
            horizon: 100,
            ..Default::default()
        };
        let err = estimate_certificate(&spec, &m, &noise, &InputSignal::Zero, &cfg, 0).unwrap_err();
        // divergence is reported against the observer's subset
        assert!(matches!(err, Error::Certification { ref subset, .. } if subset == "{1}"));
    }

    #[test]
    fn nonzero_radius_gives_consistent_k_star() {
        let (m, spec) = scalar_unit_noise();
        let noise = NoiseModel::new(0.5, 1.0, NoiseDistribution::Uniform, 2).unwrap();
        let cfg = CertificationConfig {
            trials: 16,
            horizon: 300,
            init_error_radius: 2.0,
            epsilon: 0.01,
            state_spread: 0.0,
            ..Default::default()
        };
        let c = estimate_certificate(&spec, &m, &noise, &InputSignal::Zero, &cfg, 0).unwrap();
        assert!(c.k_star > 0);
        assert!(c.c * c.lambda.powi(c.k_star as i32) * 2.0 <= 0.01);
        let rep = validate_certificate(&spec, &m, &noise, &InputSignal::Zero, &c, &cfg, 0);
        assert!(rep.rate() < 0.01, "{rep:?}");
    }

    #[test]
    fn threshold_substitution() {
        let t = table(4, 1, |_| 2.0);
        let th = compute_thresholds(&t, 4, 1, 0.5, 0.0).unwrap();
        assert_eq!(th.z_bar, 2.0);
        assert_eq!(th.gamma_bar, 2.0);
        for z in th.z_bar_j.values() {
            assert_eq!(*z, 2.0);
        }
    }

    #[test]
    fn identical_gains_give_identical_thresholds() {
        let g = 0.37;
        let th = compute_thresholds(&table(4, 1, |_| g), 4, 1, 0.5, 0.0).unwrap();
        assert_eq!(th.z_bar, 2.0 * g * 0.5);
        assert!(th.z_bar_j.values().all(|&z| z == 2.0 * g * 0.5));
    }

    #[test]
    fn gamma_prime_uses_only_contained_subsets() {
        // distinct gains: γ_S = bits of S as a number, γ_J large for {1,2,4}
        let t = table(4, 1, |s| {
            if s == set(&[1, 2, 4]) {
                100.0
            } else {
                s.bits() as f64
            }
        });
        let th = compute_thresholds(&t, 4, 1, 0.5, 0.1).unwrap();
        let j = set(&[1, 2, 3]);
        // brute force over every 2-subset of {1,2,3,4} kept only when inside J
        let mut expect = t[&j].gamma;
        for a in 1..=4usize {
            for b in a + 1..=4 {
                let s = set(&[a, b]);
                if s.is_subset_of(j) {
                    expect = expect.max(t[&s].gamma);
                }
            }
        }
        assert_eq!(th.gamma_prime_j[&j], expect);
        assert_eq!(expect, 7.0); // γ_{1,2,3} = 0b0111
        assert_eq!(th.z_bar_j[&j], 2.0 * (0.1 + 7.0 * 0.5));
        assert_eq!(th.gamma_bar, 100.0);
    }

    #[test]
    fn k_star_maxima() {
        let mut t = table(4, 1, |_| 1.0);
        t.get_mut(&set(&[1, 3])).unwrap().k_star = 9;
        t.get_mut(&set(&[2, 3, 4])).unwrap().k_star = 4;
        t.get_mut(&SensorSet::full(4)).unwrap().k_star = 6;
        let th = compute_thresholds(&t, 4, 1, 0.5, 0.0).unwrap();
        assert_eq!(th.k_star_detect, 6);
        assert_eq!(th.k_star_isolate, 9);
    }

    #[test]
    fn missing_certificate_is_reported() {
        let mut t = table(4, 1, |_| 1.0);
        t.remove(&set(&[3, 4]));
        match compute_thresholds(&t, 4, 1, 0.5, 0.0).unwrap_err() {
            Error::MissingCertificates(v) => assert_eq!(v, vec!["{3,4}"]),
            e => panic!("unexpected {e}"),
        }
    }

    proptest! {
        #[test]
        fn inflating_a_gain_never_lowers_thresholds(
            gains in proptest::collection::vec(0.0f64..5.0, 11),
            which in 0usize..11,
            bump in 0.0f64..3.0,
        ) {
            let subs: Vec<SensorSet> = required_subsets(4, 1).unwrap().into_iter().map(|(s, _)| s).collect();
            let base: CertificateTable = subs.iter().zip(&gains).map(|(s, g)| (*s, cert(*s, *g, 0))).collect();
            let mut bumped = base.clone();
            bumped.get_mut(&subs[which]).unwrap().gamma += bump;
            let a = compute_thresholds(&base, 4, 1, 0.5, 0.0).unwrap();
            let b = compute_thresholds(&bumped, 4, 1, 0.5, 0.0).unwrap();
            prop_assert!(b.z_bar >= a.z_bar);
            for (j, z) in &a.z_bar_j {
                prop_assert!(b.z_bar_j[j] >= *z);
                // perturbing a subset outside J leaves z̄_J untouched
                if !subs[which].is_subset_of(*j) {
                    prop_assert_eq!(b.z_bar_j[j], *z);
                }
            }
        }
    }
}
