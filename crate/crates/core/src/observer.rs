//! Subset-driven observers and the observer bank.
//!
//! Each observer reads only the sensors in its subset `J` and runs
//!
//! ```text
//! x̂+ = A x̂ + G f(H x̂ + K (C_J x̂ - y_J)) + L (C_J x̂ - y_J) + B u
//! ```

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::PlantModel;
use crate::sensors::{binomial, enumerate_subsets, restrict, restrict_rows, SensorSet};

/// Which layer of the bank an observer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    /// Uses all `p` sensors.
    Full,
    /// Uses `p - q` sensors.
    Detection,
    /// Uses `p - 2q` sensors.
    Isolation,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Full => "full",
            Role::Detection => "detection",
            Role::Isolation => "isolation",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Output-injection gains `(K_J, L_J)` for one subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    /// `r x card(J)`, injected inside the nonlinearity.
    pub k: DMatrix<f64>,
    /// `n x card(J)`, injected into the state update.
    pub l: DMatrix<f64>,
}

impl Gains {
    pub fn zero(n: usize, r: usize, card: usize) -> Self {
        Gains {
            k: DMatrix::zeros(r, card),
            l: DMatrix::zeros(n, card),
        }
    }
}

/// Gains keyed by sensor subset.
pub type GainTable = BTreeMap<SensorSet, Gains>;

/// One observer of the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverSpec {
    subset: SensorSet,
    role: Role,
    gains: Gains,
    c_j: DMatrix<f64>,
}

impl ObserverSpec {
    pub fn new(model: &PlantModel, subset: SensorSet, role: Role, gains: Gains) -> Result<Self> {
        let card = subset.len();
        let path = format!("gains[{subset}]");
        if gains.k.nrows() != model.r() || gains.k.ncols() != card {
            return Err(Error::config(
                format!("{path}.K"),
                format!(
                    "expected {}x{card}, got {}x{}",
                    model.r(),
                    gains.k.nrows(),
                    gains.k.ncols()
                ),
            ));
        }
        if gains.l.nrows() != model.n() || gains.l.ncols() != card {
            return Err(Error::config(
                format!("{path}.L"),
                format!(
                    "expected {}x{card}, got {}x{}",
                    model.n(),
                    gains.l.nrows(),
                    gains.l.ncols()
                ),
            ));
        }
        let c_j = restrict_rows(model.c(), subset)?;
        Ok(ObserverSpec {
            subset,
            role,
            gains,
            c_j,
        })
    }

    pub fn subset(&self) -> SensorSet {
        self.subset
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn gains(&self) -> &Gains {
        &self.gains
    }

    /// `C_J`, the rows of the output matrix read by this observer.
    pub fn c_j(&self) -> &DMatrix<f64> {
        &self.c_j
    }

    /// Advances the estimate by one step using the full measurement `y`.
    pub fn step(
        &self,
        model: &PlantModel,
        xhat: &DVector<f64>,
        y: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        model.check_state(xhat)?;
        model.check_input(u)?;
        if y.len() != model.p() {
            return Err(Error::config(
                "measurement",
                format!("expected length {}, got {}", model.p(), y.len()),
            ));
        }
        let y_j = restrict(y, self.subset)?;
        Ok(self.step_restricted(model, xhat, &y_j, u))
    }

    /// Same as [`ObserverSpec::step`] with `y` already restricted to `J`.
    pub(crate) fn step_restricted(
        &self,
        model: &PlantModel,
        xhat: &DVector<f64>,
        y_j: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        let innovation = &self.c_j * xhat - y_j;
        let arg = model.h() * xhat + &self.gains.k * &innovation;
        model.a() * xhat + model.nonlinear_term(&arg) + &self.gains.l * innovation + model.rho(u)
    }
}

/// Free-function form of [`ObserverSpec::step`].
pub fn observer_step(
    spec: &ObserverSpec,
    model: &PlantModel,
    xhat: &DVector<f64>,
    y: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    spec.step(model, xhat, y, u)
}

/// Required subsets for a bank with `p` sensors and attack bound `q`, in
/// bank order: full set, then the `p - q` layer, then the `p - 2q` layer.
pub fn required_subsets(p: usize, q: usize) -> Result<Vec<(SensorSet, Role)>> {
    if p == 0 {
        return Err(Error::config("dimensions.p", "must be positive"));
    }
    if 2 * q >= p {
        return Err(Error::config(
            "run.q",
            format!("q = {q} must satisfy q < p/2 (p = {p})"),
        ));
    }
    let mut out = vec![(SensorSet::full(p), Role::Full)];
    if q > 0 {
        out.extend(enumerate_subsets(p, p - q)?.into_iter().map(|s| (s, Role::Detection)));
        out.extend(enumerate_subsets(p, p - 2 * q)?.into_iter().map(|s| (s, Role::Isolation)));
    }
    Ok(out)
}

/// The observer bank with current estimates.
///
/// Members are ordered full set, detection layer, isolation layer; each
/// layer is in lexicographic subset order. With `q = 0` the bank holds the
/// full-set observer only, the detection layer aliases it and the isolation
/// layer is empty.
#[derive(Debug, Clone)]
pub struct ObserverBank {
    p: usize,
    q: usize,
    members: Vec<ObserverSpec>,
    states: Vec<DVector<f64>>,
    detection: Vec<usize>,
    isolation: Vec<usize>,
    index: BTreeMap<SensorSet, usize>,
}

impl ObserverBank {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[ObserverSpec] {
        &self.members
    }

    pub fn member(&self, idx: usize) -> &ObserverSpec {
        &self.members[idx]
    }

    /// Index of the full-set observer (always 0).
    pub fn full_index(&self) -> usize {
        0
    }

    /// Member indices of the `p - q` layer.
    pub fn detection_layer(&self) -> &[usize] {
        &self.detection
    }

    /// Member indices of the `p - 2q` layer.
    pub fn isolation_layer(&self) -> &[usize] {
        &self.isolation
    }

    pub fn index_of(&self, subset: SensorSet) -> Option<usize> {
        self.index.get(&subset).copied()
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn estimate(&self, idx: usize) -> &DVector<f64> {
        &self.states[idx]
    }

    /// Sets every member's estimate to `xhat0`.
    pub fn initialize_all(&mut self, xhat0: &DVector<f64>) {
        for s in &mut self.states {
            *s = xhat0.clone();
        }
    }

    /// Sets each member's estimate individually (bank order).
    pub fn initialize(&mut self, xhat0: Vec<DVector<f64>>) -> Result<()> {
        if xhat0.len() != self.members.len() {
            return Err(Error::config(
                "initial.observer",
                format!("expected {} estimates, got {}", self.members.len(), xhat0.len()),
            ));
        }
        let n = self.states.first().map_or(0, |s| s.len());
        if let Some(bad) = xhat0.iter().position(|x| x.len() != n) {
            return Err(Error::config(
                format!("initial.observer[{bad}]"),
                format!("expected length {n}"),
            ));
        }
        self.states = xhat0;
        Ok(())
    }

    /// Advances every member once, in bank order, from the same
    /// measurement.
    pub fn step(&mut self, model: &PlantModel, y: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if y.len() != self.p {
            return Err(Error::config(
                "measurement",
                format!("expected length {}, got {}", self.p, y.len()),
            ));
        }
        model.check_input(u)?;
        for (spec, state) in self.members.iter().zip(self.states.iter_mut()) {
            let y_j = restrict(y, spec.subset)?;
            *state = spec.step_restricted(model, state, &y_j, u);
        }
        Ok(())
    }

    /// The `p - 2q` subsets inside `j`, as member indices.
    pub fn isolation_members_within(&self, j: SensorSet) -> Vec<usize> {
        self.isolation
            .iter()
            .copied()
            .filter(|&s| self.members[s].subset.is_subset_of(j))
            .collect()
    }
}

/// Builds the bank of `1 + C(p, q) + C(p, 2q)` observers.
pub fn build_bank(model: &PlantModel, q: usize, gains: &GainTable) -> Result<ObserverBank> {
    let p = model.p();
    let required = required_subsets(p, q)?;
    let missing: Vec<String> = required
        .iter()
        .filter(|(s, _)| !gains.contains_key(s))
        .map(|(s, _)| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGains(missing));
    }
    let mut members = Vec::with_capacity(required.len());
    for (s, role) in &required {
        members.push(ObserverSpec::new(model, *s, *role, gains[s].clone())?);
    }
    let (detection, isolation) = if q == 0 {
        (vec![0], Vec::new())
    } else {
        let d = binomial(p, q);
        ((1..1 + d).collect(), (1 + d..members.len()).collect())
    };
    let index = members
        .iter()
        .enumerate()
        .map(|(i, m)| (m.subset, i))
        .collect();
    let n = model.n();
    Ok(ObserverBank {
        p,
        q,
        states: vec![DVector::zeros(n); members.len()],
        members,
        detection,
        isolation,
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::benchmark_plant;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn zero_gains(model: &PlantModel, q: usize) -> GainTable {
        required_subsets(model.p(), q)
            .unwrap()
            .into_iter()
            .map(|(s, _)| (s, Gains::zero(model.n(), model.r(), s.len())))
            .collect()
    }

    fn set(one_based: &[usize]) -> SensorSet {
        SensorSet::from_indices(one_based.iter().map(|i| i - 1))
    }

    #[test]
    fn benchmark_bank_has_eleven_members() {
        let m = benchmark_plant(0.1, 1.0);
        let bank = build_bank(&m, 1, &zero_gains(&m, 1)).unwrap();
        assert_eq!(bank.len(), 11);
        assert_eq!(bank.detection_layer().len(), 4);
        assert_eq!(bank.isolation_layer().len(), 6);
        assert_eq!(bank.member(0).subset(), SensorSet::full(4));
        assert_eq!(bank.member(1).subset(), set(&[1, 2, 3]));
        assert_eq!(bank.member(5).subset(), set(&[1, 2]));
    }

    #[test]
    fn three_sensor_bank_has_seven_members() {
        let m = PlantModel::new(
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::zeros(2, 1),
            DMatrix::zeros(1, 2),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            DMatrix::zeros(2, 1),
            crate::model::Nonlinearity::Zero,
        )
        .unwrap();
        let bank = build_bank(&m, 1, &zero_gains(&m, 1)).unwrap();
        assert_eq!(bank.len(), 1 + 3 + 3);
    }

    #[test]
    fn q_zero_is_degenerate() {
        let m = benchmark_plant(0.1, 1.0);
        let bank = build_bank(&m, 0, &zero_gains(&m, 0)).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.detection_layer(), &[0]);
        assert!(bank.isolation_layer().is_empty());
    }

    #[test]
    fn missing_gains_are_listed() {
        let m = benchmark_plant(0.1, 1.0);
        let mut g = zero_gains(&m, 1);
        g.remove(&set(&[1, 3]));
        g.remove(&set(&[2, 3, 4]));
        match build_bank(&m, 1, &g).unwrap_err() {
            Error::MissingGains(list) => assert_eq!(list, vec!["{2,3,4}", "{1,3}"]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn wrong_gain_shape_is_rejected() {
        let m = benchmark_plant(0.1, 1.0);
        let mut g = zero_gains(&m, 1);
        g.insert(set(&[1, 2]), Gains::zero(2, 1, 3));
        assert!(build_bank(&m, 1, &g).is_err());
    }

    #[test]
    fn zero_gain_observer_is_open_loop_plant() {
        let m = benchmark_plant(0.1, 1.0);
        let spec = ObserverSpec::new(&m, set(&[1, 2]), Role::Isolation, Gains::zero(2, 1, 2)).unwrap();
        let xhat = v(&[0.3, -1.2]);
        let y = v(&[100.0, -3.0, 7.0, 2.0]);
        let u = v(&[0.4]);
        assert_eq!(spec.step(&m, &xhat, &y, &u).unwrap(), m.plant_step(&xhat, &u).unwrap());
    }

    #[test]
    fn zero_innovation_matches_plant_on_benchmark() {
        let m = benchmark_plant(0.1, 1.0);
        let gains = Gains {
            k: DMatrix::from_row_slice(1, 3, &[0.1, -0.2, 0.05]),
            l: DMatrix::from_row_slice(2, 3, &[-0.1, 0.02, -0.05, 0.01, -0.03, 0.02]),
        };
        let spec = ObserverSpec::new(&m, set(&[1, 2, 3]), Role::Detection, gains).unwrap();
        let x = v(&[1.0, 0.0]);
        let y = m.output(&x);
        let out = spec.step(&m, &x, &y, &v(&[0.0])).unwrap();
        let plant = m.plant_step(&x, &v(&[0.0])).unwrap();
        assert_eq!(out, plant);
        let s = 1.0f64.sin();
        assert!((out[0] - (1.0 + 0.05 * s)).abs() < 1e-15);
        assert!((out[1] - 0.1 * s).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn bank_cardinality(p in 3usize..9, q in 1usize..4) {
            prop_assume!(2 * q < p);
            let req = required_subsets(p, q).unwrap();
            prop_assert_eq!(req.len(), 1 + binomial(p, q) + binomial(p, 2 * q));
        }

        #[test]
        fn zero_innovation_property(
            x in proptest::collection::vec(-3.0f64..3.0, 2),
            kv in proptest::collection::vec(-1.0f64..1.0, 2),
            lv in proptest::collection::vec(-1.0f64..1.0, 4),
            u in -1.0f64..1.0,
        ) {
            let m = benchmark_plant(0.1, 1.0);
            let gains = Gains {
                k: DMatrix::from_row_slice(1, 2, &kv),
                l: DMatrix::from_row_slice(2, 2, &lv),
            };
            let spec = ObserverSpec::new(&m, set(&[2, 4]), Role::Isolation, gains).unwrap();
            let x = v(&x);
            let u = v(&[u]);
            let out = spec.step(&m, &x, &m.output(&x), &u).unwrap();
            prop_assert_eq!(out, m.plant_step(&x, &u).unwrap());
        }
    }
}
