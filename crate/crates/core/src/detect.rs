//! Discrepancy signal `π(k)` and windowed attack detection.
//!
//! `π(k)` is the largest Euclidean distance between the full-set estimate
//! and any `p - q` estimate. After the settling step `k⋆` the time axis is
//! cut into windows of `N` steps, window `i` covering
//! `[k⋆ + (i-1)N, k⋆ + iN - 1]`; a window is flagged when some `π(k)` in it
//! strictly exceeds `z̄`.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::certify::ThresholdSet;
use crate::error::{Error, Result};
use crate::model::PlantModel;
use crate::observer::ObserverBank;
use crate::sensors::{enumerate_subsets, SensorSet};
use crate::sim::{simulate, Trajectory, TrajectorySetup};

/// Max distance from `reference` to the estimates, with the lexicographically
/// smallest subset winning ties. Estimates must be supplied in lexicographic
/// subset order.
pub(crate) fn max_distance<'a, I>(reference: &DVector<f64>, estimates: I) -> (f64, SensorSet)
where
    I: IntoIterator<Item = (SensorSet, &'a DVector<f64>)>,
{
    let mut best = (f64::NEG_INFINITY, SensorSet::EMPTY);
    for (s, est) in estimates {
        let d = (reference - est).norm();
        if d > best.0 {
            best = (d, s);
        }
    }
    best
}

/// `π = max_J |x̂ - x̂_J|` over every `p - q` subset, with its maximiser.
pub fn discrepancy(
    p: usize,
    q: usize,
    full_estimate: &DVector<f64>,
    layer_estimates: &BTreeMap<SensorSet, DVector<f64>>,
) -> Result<(f64, SensorSet)> {
    let expected = enumerate_subsets(p, p - q)?;
    if expected.len() != layer_estimates.len()
        || expected.iter().any(|s| !layer_estimates.contains_key(s))
    {
        let missing: Vec<String> = expected
            .iter()
            .filter(|s| !layer_estimates.contains_key(s))
            .map(|s| s.to_string())
            .collect();
        return Err(Error::Invariant(format!(
            "discrepancy needs every {}-subset of {p} sensors; missing [{}], got {} entries",
            p - q,
            missing.join(", "),
            layer_estimates.len()
        )));
    }
    Ok(max_distance(
        full_estimate,
        layer_estimates.iter().map(|(s, v)| (*s, v)),
    ))
}

/// Flags a window when some `π(k)` strictly exceeds `z̄`. Returns the
/// offset of the first trigger inside the window.
pub fn detect_window(pi: &[f64], z_bar: f64) -> Option<usize> {
    pi.iter().position(|&v| v > z_bar)
}

/// One step of the detection trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiRecord {
    pub k: usize,
    pub pi: f64,
    pub argmax: SensorSet,
}

/// Window bookkeeping shared by detection and isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    /// One-based window index `i`.
    pub index: usize,
    pub start: usize,
    /// Last step inside the window (inclusive).
    pub end: usize,
    /// Fewer than `N` steps were available.
    pub partial: bool,
}

/// Windows of length `n` starting at `offset`, covering steps `< horizon`.
pub fn windows(offset: usize, n: usize, horizon: usize) -> Vec<Window> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut start = offset;
    let mut index = 1;
    while start < horizon {
        let end = (start + n - 1).min(horizon - 1);
        out.push(Window {
            index,
            start,
            end,
            partial: end + 1 - start < n,
        });
        start += n;
        index += 1;
    }
    out
}

/// Which window (if any) step `k` belongs to.
pub fn window_of(k: usize, offset: usize, n: usize) -> Option<usize> {
    if k < offset || n == 0 {
        None
    } else {
        Some((k - offset) / n + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionVerdict {
    pub window: Window,
    pub detected: bool,
    pub first_trigger: Option<usize>,
}

/// Output of a detection run.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionState {
    pub window_size: usize,
    pub k_star: usize,
    pub z_bar: f64,
    /// Every simulated step, including those before `k⋆`.
    pub trace: Vec<PiRecord>,
    pub verdicts: Vec<DetectionVerdict>,
}

impl DetectionState {
    pub fn complete_verdicts(&self) -> impl Iterator<Item = &DetectionVerdict> {
        self.verdicts.iter().filter(|v| !v.window.partial)
    }
}

/// Computes `π(k)` at every step of a simulated trajectory.
pub fn pi_trace(bank: &ObserverBank, traj: &Trajectory) -> Vec<PiRecord> {
    let full = bank.full_index();
    traj.estimates
        .iter()
        .enumerate()
        .map(|(k, est)| {
            let (pi, argmax) = max_distance(
                &est[full],
                bank.detection_layer()
                    .iter()
                    .map(|&j| (bank.member(j).subset(), &est[j])),
            );
            PiRecord { k, pi, argmax }
        })
        .collect()
}

/// Applies the windowed test to a `π` trace.
pub fn evaluate_detection(
    trace: Vec<PiRecord>,
    z_bar: f64,
    k_star: usize,
    window_size: usize,
) -> Result<DetectionState> {
    if window_size == 0 {
        return Err(Error::config("run.window", "window size must be >= 1"));
    }
    let horizon = trace.len();
    if horizon < k_star + window_size {
        return Err(Error::config(
            "run.horizon",
            format!("horizon {horizon} shorter than k* + N = {}", k_star + window_size),
        ));
    }
    let pis: Vec<f64> = trace.iter().map(|r| r.pi).collect();
    let verdicts = windows(k_star, window_size, horizon)
        .into_iter()
        .map(|w| {
            let first = detect_window(&pis[w.start..=w.end], z_bar).map(|o| w.start + o);
            DetectionVerdict {
                window: w,
                detected: first.is_some(),
                first_trigger: first,
            }
        })
        .collect();
    Ok(DetectionState {
        window_size,
        k_star,
        z_bar,
        trace,
        verdicts,
    })
}

/// Simulates the plant with the bank and runs windowed detection.
pub fn run_detection(
    model: &PlantModel,
    bank: &mut ObserverBank,
    thresholds: &ThresholdSet,
    setup: &TrajectorySetup,
    window_size: usize,
) -> Result<(Trajectory, DetectionState)> {
    if setup.horizon < thresholds.k_star_detect + window_size {
        return Err(Error::config(
            "run.horizon",
            format!(
                "horizon {} shorter than k* + N = {}",
                setup.horizon,
                thresholds.k_star_detect + window_size
            ),
        ));
    }
    let traj = simulate(model, bank, setup)?;
    let state = evaluate_detection(
        pi_trace(bank, &traj),
        thresholds.z_bar,
        thresholds.k_star_detect,
        window_size,
    )?;
    Ok((traj, state))
}
