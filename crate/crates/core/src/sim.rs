//! Plant/bank co-simulation, end-to-end scenario runs and run metrics.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::certify::{compute_thresholds, CertificateTable, ThresholdSet};
use crate::detect::{evaluate_detection, pi_trace, DetectionState};
use crate::error::{Error, Result};
use crate::isolate::{evaluate_isolation, isolation_trace, IsolationState};
use crate::model::{AttackScenario, InputSignal, NoiseModel, PlantModel};
use crate::observer::{build_bank, GainTable, ObserverBank};
use crate::scenario::Scenario;
use crate::sensors::SensorSet;

/// How the bank's estimates start.
#[derive(Debug, Clone, PartialEq)]
pub enum ObserverStart {
    /// Every member starts at the true initial state.
    Exact,
    /// One initial estimate per bank member, in bank order.
    PerMember(Vec<DVector<f64>>),
}

/// Everything needed to simulate one trajectory.
#[derive(Debug, Clone)]
pub struct TrajectorySetup {
    pub noise: NoiseModel,
    pub attack: AttackScenario,
    pub input: InputSignal,
    pub x0: DVector<f64>,
    pub observer_start: ObserverStart,
    pub horizon: usize,
}

/// Logged co-simulation, steps `0..horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub a: Vec<DVector<f64>>,
    pub m: Vec<DVector<f64>>,
    /// `estimates[k][member]`, bank order.
    pub estimates: Vec<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// `|x̂_member(k) - x(k)|`.
    pub fn error_norm(&self, k: usize, member: usize) -> f64 {
        (&self.estimates[k][member] - &self.x[k]).norm()
    }
}

/// Steps the plant and every bank member for `setup.horizon` steps.
pub fn simulate(
    model: &PlantModel,
    bank: &mut ObserverBank,
    setup: &TrajectorySetup,
) -> Result<Trajectory> {
    if setup.horizon == 0 {
        return Err(Error::config("run.horizon", "must be >= 1"));
    }
    model.check_state(&setup.x0)?;
    setup.input.validate(model.m())?;
    match &setup.observer_start {
        ObserverStart::Exact => bank.initialize_all(&setup.x0),
        ObserverStart::PerMember(v) => bank.initialize(v.clone())?,
    }
    let p = model.p();
    let h = setup.horizon;
    let mut traj = Trajectory {
        x: Vec::with_capacity(h),
        y: Vec::with_capacity(h),
        a: Vec::with_capacity(h),
        m: Vec::with_capacity(h),
        estimates: Vec::with_capacity(h),
    };
    let mut x = setup.x0.clone();
    for k in 0..h {
        let a = setup.attack.sample(k, p);
        let m = setup.noise.sample(k, p);
        let y = model.output(&x) + &a + &m;
        let u = setup.input.at(k, model.m());
        traj.estimates.push(bank.states().to_vec());
        bank.step(model, &y, &u)?;
        let next = model.step_unchecked(&x, &u);
        traj.x.push(std::mem::replace(&mut x, next));
        traj.y.push(y);
        traj.a.push(a);
        traj.m.push(m);
    }
    if traj.x.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
        return Err(Error::Invariant("plant state left the finite range".into()));
    }
    Ok(traj)
}

/// Runs both algorithms on one trajectory.
pub fn evaluate(
    bank: &ObserverBank,
    thresholds: &ThresholdSet,
    traj: &Trajectory,
    window: usize,
) -> Result<(DetectionState, Option<IsolationState>)> {
    let det = evaluate_detection(
        pi_trace(bank, traj),
        thresholds.z_bar,
        thresholds.k_star_detect,
        window,
    )?;
    let iso = if bank.q() == 0 {
        None
    } else {
        let (layer, z, trace) = isolation_trace(bank, traj, thresholds)?;
        Some(evaluate_isolation(
            bank.p(),
            bank.q(),
            layer,
            z,
            trace,
            thresholds.k_star_isolate,
            window,
        )?)
    };
    Ok((det, iso))
}

/// Per-run outcome counts. Rates are derived, so pooling is exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunMetrics {
    pub id: String,
    pub seed: u64,
    pub window: usize,
    pub p: usize,
    pub attacked: SensorSet,
    /// Complete detection windows in runs with `W ≠ ∅`, and how many fired.
    pub attacked_windows: usize,
    pub detected: usize,
    /// Complete detection windows in runs with `W = ∅`, and how many fired.
    pub clean_windows: usize,
    pub false_alarms: usize,
    /// Complete isolation windows and their outcomes.
    pub isolation_windows: usize,
    pub isolation_exact: usize,
    pub isolation_superset: usize,
    pub isolation_inconclusive: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl RunMetrics {
    pub fn from_verdicts(
        id: impl Into<String>,
        seed: u64,
        p: usize,
        attacked: SensorSet,
        detection: &DetectionState,
        isolation: Option<&IsolationState>,
    ) -> Self {
        let complete: Vec<bool> = detection.complete_verdicts().map(|v| v.detected).collect();
        let fired = complete.iter().filter(|d| **d).count();
        let (attacked_windows, detected, clean_windows, false_alarms) = if attacked.is_empty() {
            (0, 0, complete.len(), fired)
        } else {
            (complete.len(), fired, 0, 0)
        };
        let mut m = RunMetrics {
            id: id.into(),
            seed,
            window: detection.window_size,
            p,
            attacked,
            attacked_windows,
            detected,
            clean_windows,
            false_alarms,
            isolation_windows: 0,
            isolation_exact: 0,
            isolation_superset: 0,
            isolation_inconclusive: 0,
        };
        if let Some(iso) = isolation {
            for v in iso.complete_verdicts() {
                m.isolation_windows += 1;
                match v.isolated(p) {
                    None => m.isolation_inconclusive += 1,
                    Some(a) => {
                        if a == attacked {
                            m.isolation_exact += 1;
                        }
                        if attacked.is_subset_of(a) {
                            m.isolation_superset += 1;
                        }
                    }
                }
            }
        }
        m
    }

    pub fn detection_rate(&self) -> Option<f64> {
        ratio(self.detected, self.attacked_windows)
    }

    pub fn false_alarm_rate(&self) -> Option<f64> {
        ratio(self.false_alarms, self.clean_windows)
    }

    /// Fraction of isolation windows with `Ã(i) = W`.
    pub fn isolation_accuracy(&self) -> Option<f64> {
        ratio(self.isolation_exact, self.isolation_windows)
    }

    /// Fraction of isolation windows with `Ã(i) ⊇ W`.
    pub fn isolation_superset_rate(&self) -> Option<f64> {
        ratio(self.isolation_superset, self.isolation_windows)
    }

    pub fn inconclusive_rate(&self) -> Option<f64> {
        ratio(self.isolation_inconclusive, self.isolation_windows)
    }
}

/// Per-run rows plus a window-weighted pooled row.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<RunMetrics>,
    pub pooled: RunMetrics,
}

/// Aggregates runs that share `p`. Pooled rates weight every window equally.
pub fn summarize(runs: &[RunMetrics]) -> Result<Summary> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Aggregation("no runs to summarize".into()))?;
    if let Some(bad) = runs.iter().find(|r| r.p != first.p) {
        return Err(Error::Aggregation(format!(
            "run `{}` has p = {} but `{}` has p = {}",
            bad.id, bad.p, first.id, first.p
        )));
    }
    let same_w = runs.iter().all(|r| r.attacked == first.attacked);
    let same_n = runs.iter().all(|r| r.window == first.window);
    let mut pooled = RunMetrics {
        id: "pooled".into(),
        seed: 0,
        window: if same_n { first.window } else { 0 },
        p: first.p,
        attacked: if same_w { first.attacked } else { SensorSet::EMPTY },
        attacked_windows: 0,
        detected: 0,
        clean_windows: 0,
        false_alarms: 0,
        isolation_windows: 0,
        isolation_exact: 0,
        isolation_superset: 0,
        isolation_inconclusive: 0,
    };
    for r in runs {
        pooled.attacked_windows += r.attacked_windows;
        pooled.detected += r.detected;
        pooled.clean_windows += r.clean_windows;
        pooled.false_alarms += r.false_alarms;
        pooled.isolation_windows += r.isolation_windows;
        pooled.isolation_exact += r.isolation_exact;
        pooled.isolation_superset += r.isolation_superset;
        pooled.isolation_inconclusive += r.isolation_inconclusive;
    }
    Ok(Summary {
        rows: runs.to_vec(),
        pooled,
    })
}

/// A completed scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub id: String,
    pub seed: u64,
    pub horizon: usize,
    pub window: usize,
    pub attacked: SensorSet,
    pub thresholds: ThresholdSet,
    /// Subset and role label of each bank member, bank order.
    pub members: Vec<(SensorSet, &'static str)>,
    pub trajectory: Trajectory,
    pub detection: DetectionState,
    pub isolation: Option<IsolationState>,
    pub metrics: RunMetrics,
}

/// Bank plus thresholds, reusable across seeds and window sizes.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub model: PlantModel,
    pub bank: ObserverBank,
    pub thresholds: ThresholdSet,
}

impl Pipeline {
    pub fn new(scenario: &Scenario, gains: &GainTable, certs: &CertificateTable) -> Result<Self> {
        let model = scenario.model.clone();
        let bank = build_bank(&model, scenario.q, gains)?;
        let thresholds = compute_thresholds(
            certs,
            model.p(),
            scenario.q,
            scenario.noise.bound(),
            scenario.certification.epsilon,
        )?;
        Ok(Pipeline {
            model,
            bank,
            thresholds,
        })
    }

    pub fn simulate(&mut self, setup: &TrajectorySetup) -> Result<Trajectory> {
        simulate(&self.model, &mut self.bank, setup)
    }

    /// Simulates and evaluates one run of `scenario` under `seed`.
    pub fn run(&mut self, scenario: &Scenario, seed: u64, window: usize) -> Result<ScenarioRun> {
        let setup = scenario.trajectory_setup(seed, self.bank.len())?;
        let need = self.thresholds.k_star_detect.max(self.thresholds.k_star_isolate) + window;
        if setup.horizon < need {
            return Err(Error::config(
                "run.horizon",
                format!("horizon {} shorter than k* + N = {need}", setup.horizon),
            ));
        }
        let trajectory = self.simulate(&setup)?;
        let (detection, isolation) = evaluate(&self.bank, &self.thresholds, &trajectory, window)?;
        let attacked = scenario.attack.attacked();
        let id = format!("{}_N{}_s{}", scenario.name, window, seed);
        let metrics = RunMetrics::from_verdicts(
            id.clone(),
            seed,
            self.model.p(),
            attacked,
            &detection,
            isolation.as_ref(),
        );
        Ok(ScenarioRun {
            id,
            seed,
            horizon: setup.horizon,
            window,
            attacked,
            thresholds: self.thresholds.clone(),
            members: self
                .bank
                .members()
                .iter()
                .map(|m| (m.subset(), m.role().label()))
                .collect(),
            trajectory,
            detection,
            isolation,
            metrics,
        })
    }
}

/// Runs every `(window, seed)` pair, in parallel, ordered by window then seed.
pub fn sweep(
    scenario: &Scenario,
    gains: &GainTable,
    certs: &CertificateTable,
    windows: &[usize],
    seeds: &[u64],
) -> Result<Vec<ScenarioRun>> {
    let base = Pipeline::new(scenario, gains, certs)?;
    let jobs: Vec<(usize, u64)> = windows
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(n, s)| base.clone().run(scenario, s, n))
        .collect()
}

/// Runs a validated scenario with its configured seed and window.
pub fn run_scenario(
    scenario: &Scenario,
    gains: &GainTable,
    certs: &CertificateTable,
) -> Result<ScenarioRun> {
    Pipeline::new(scenario, gains, certs)?.run(scenario, scenario.seed, scenario.window)
}
