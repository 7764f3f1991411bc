//! Per-subset discrepancies `π_J(k)`, the attack-free union `W̄(k)` and
//! windowed attack isolation.
//!
//! In each window every step whose `W̄(k)` coincides with a candidate set
//! (any subset of cardinality at least `p - q`) increments that candidate's
//! counter. The candidate counted most often is declared attack-free; its
//! complement is the isolated set. Ties go to the larger candidate, then to
//! the lexicographically smaller one.

use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::certify::ThresholdSet;
use crate::detect::{max_distance, windows, Window};
use crate::error::{Error, Result};
use crate::model::PlantModel;
use crate::observer::ObserverBank;
use crate::sensors::{enumerate_subsets, subsets_within, SensorSet};
use crate::sim::{simulate, Trajectory, TrajectorySetup};

/// `π_J = max_{S ⊂ J} |x̂_J - x̂_S|` over the `p - 2q` subsets of `J`.
pub fn discrepancy_j(
    p: usize,
    q: usize,
    j: SensorSet,
    estimate_j: &DVector<f64>,
    sub_estimates: &BTreeMap<SensorSet, DVector<f64>>,
) -> Result<f64> {
    if j.len() + q != p || q == 0 {
        return Err(Error::Invariant(format!(
            "π_J needs a subset of cardinality p - q = {}, got {j}",
            p.saturating_sub(q)
        )));
    }
    let expected = subsets_within(j, p - 2 * q);
    if expected.len() != sub_estimates.len()
        || expected.iter().any(|s| !sub_estimates.contains_key(s))
    {
        let keys: Vec<String> = sub_estimates.keys().map(|s| s.to_string()).collect();
        return Err(Error::Invariant(format!(
            "π_J for J = {j} needs exactly its {}-subsets, got [{}]",
            p - 2 * q,
            keys.join(", ")
        )));
    }
    Ok(max_distance(estimate_j, sub_estimates.iter().map(|(s, v)| (*s, v))).0)
}

/// `W̄ = ∪ { J : π_J <= z̄_J }`.
pub fn attack_free_union(
    pi_j: &BTreeMap<SensorSet, f64>,
    z_bar_j: &BTreeMap<SensorSet, f64>,
) -> SensorSet {
    pi_j.iter()
        .filter(|(j, pi)| z_bar_j.get(j).is_some_and(|z| **pi <= *z))
        .fold(SensorSet::EMPTY, |acc, (j, _)| acc.union(*j))
}

/// Candidate sets for the counters: every subset with cardinality at least
/// `p - q`, ordered by decreasing cardinality and then lexicographically.
/// This order is also the tie-break order.
pub fn candidates(p: usize, q: usize) -> Result<Vec<SensorSet>> {
    let mut out = Vec::new();
    for card in (p - q..=p).rev() {
        out.extend(enumerate_subsets(p, card)?);
    }
    Ok(out)
}

/// One step of the isolation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationStep {
    pub k: usize,
    /// `π_J(k)` aligned with [`IsolationState::layer`].
    pub pi_j: Vec<f64>,
    pub w_bar: SensorSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationVerdict {
    pub window: Window,
    /// `n_J(i)` aligned with [`IsolationState::candidates`].
    pub counters: Vec<usize>,
    /// `J(i)`; `None` when every counter is zero.
    pub selected: Option<SensorSet>,
    /// Steps whose non-empty `W̄(k)` matched no candidate.
    pub unmatched_union: usize,
    /// Steps with `W̄(k) = ∅`.
    pub empty_union: usize,
}

impl IsolationVerdict {
    pub fn inconclusive(&self) -> bool {
        self.selected.is_none()
    }

    /// `Ã(i) = {1..p} \ J(i)`; `None` when inconclusive.
    pub fn isolated(&self, p: usize) -> Option<SensorSet> {
        self.selected.map(|j| j.complement_in(SensorSet::full(p)))
    }
}

/// Output of an isolation run.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationState {
    pub p: usize,
    pub window_size: usize,
    pub k_bar_star: usize,
    /// The `p - q` subsets, lexicographic.
    pub layer: Vec<SensorSet>,
    pub z_bar_j: Vec<f64>,
    pub candidates: Vec<SensorSet>,
    pub trace: Vec<IsolationStep>,
    pub verdicts: Vec<IsolationVerdict>,
}

impl IsolationState {
    pub fn complete_verdicts(&self) -> impl Iterator<Item = &IsolationVerdict> {
        self.verdicts.iter().filter(|v| !v.window.partial)
    }
}

/// Counts `W̄(k)` matches over one window and selects `J(i)`.
pub fn count_window(
    candidates: &[SensorSet],
    unions: &[SensorSet],
    window: Window,
) -> IsolationVerdict {
    let mut counters = vec![0usize; candidates.len()];
    let mut unmatched_union = 0;
    let mut empty_union = 0;
    for w in unions {
        match candidates.iter().position(|c| c == w) {
            Some(i) => counters[i] += 1,
            None if w.is_empty() => empty_union += 1,
            None => unmatched_union += 1,
        }
    }
    let mut selected = None;
    let mut best = 0usize;
    for (c, &n) in candidates.iter().zip(&counters) {
        // strict: earlier candidates win ties
        if n > best {
            best = n;
            selected = Some(*c);
        }
    }
    IsolationVerdict {
        window,
        counters,
        selected,
        unmatched_union,
        empty_union,
    }
}

/// Computes `π_J(k)` and `W̄(k)` at every step of a trajectory.
pub fn isolation_trace(
    bank: &ObserverBank,
    traj: &Trajectory,
    thresholds: &ThresholdSet,
) -> Result<(Vec<SensorSet>, Vec<f64>, Vec<IsolationStep>)> {
    if bank.q() == 0 {
        return Err(Error::config("run.q", "isolation requires q >= 1"));
    }
    let layer_idx = bank.detection_layer();
    let layer: Vec<SensorSet> = layer_idx.iter().map(|&j| bank.member(j).subset()).collect();
    let mut z = Vec::with_capacity(layer.len());
    for j in &layer {
        z.push(*thresholds.z_bar_j.get(j).ok_or_else(|| {
            Error::MissingCertificates(vec![j.to_string()])
        })?);
    }
    let subs: Vec<Vec<usize>> = layer.iter().map(|j| bank.isolation_members_within(*j)).collect();
    let trace = traj
        .estimates
        .iter()
        .enumerate()
        .map(|(k, est)| {
            let mut w_bar = SensorSet::EMPTY;
            let pi_j: Vec<f64> = layer_idx
                .iter()
                .zip(&subs)
                .zip(layer.iter().zip(&z))
                .map(|((&j, s_idx), (set, zj))| {
                    let pi = max_distance(
                        &est[j],
                        s_idx.iter().map(|&s| (bank.member(s).subset(), &est[s])),
                    )
                    .0;
                    if pi <= *zj {
                        w_bar = w_bar.union(*set);
                    }
                    pi
                })
                .collect();
            IsolationStep { k, pi_j, w_bar }
        })
        .collect();
    Ok((layer, z, trace))
}

/// Applies windowed counting to an isolation trace.
pub fn evaluate_isolation(
    p: usize,
    q: usize,
    layer: Vec<SensorSet>,
    z_bar_j: Vec<f64>,
    trace: Vec<IsolationStep>,
    k_bar_star: usize,
    window_size: usize,
) -> Result<IsolationState> {
    if window_size == 0 {
        return Err(Error::config("run.window", "window size must be >= 1"));
    }
    let horizon = trace.len();
    if horizon < k_bar_star + window_size {
        return Err(Error::config(
            "run.horizon",
            format!(
                "horizon {horizon} shorter than k̄* + N = {}",
                k_bar_star + window_size
            ),
        ));
    }
    let cands = candidates(p, q)?;
    let unions: Vec<SensorSet> = trace.iter().map(|s| s.w_bar).collect();
    let verdicts = windows(k_bar_star, window_size, horizon)
        .into_iter()
        .map(|w| count_window(&cands, &unions[w.start..=w.end], w))
        .collect();
    Ok(IsolationState {
        p,
        window_size,
        k_bar_star,
        layer,
        z_bar_j,
        candidates: cands,
        trace,
        verdicts,
    })
}

/// Simulates the plant with the bank and runs windowed isolation.
pub fn run_isolation(
    model: &PlantModel,
    bank: &mut ObserverBank,
    thresholds: &ThresholdSet,
    setup: &TrajectorySetup,
    window_size: usize,
) -> Result<(Trajectory, IsolationState)> {
    if bank.q() == 0 {
        return Err(Error::config("run.q", "isolation requires q >= 1"));
    }
    if setup.horizon < thresholds.k_star_isolate + window_size {
        return Err(Error::config(
            "run.horizon",
            format!(
                "horizon {} shorter than k̄* + N = {}",
                setup.horizon,
                thresholds.k_star_isolate + window_size
            ),
        ));
    }
    let traj = simulate(model, bank, setup)?;
    let (layer, z, trace) = isolation_trace(bank, &traj, thresholds)?;
    let state = evaluate_isolation(
        bank.p(),
        bank.q(),
        layer,
        z,
        trace,
        thresholds.k_star_isolate,
        window_size,
    )?;
    Ok((traj, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(one_based: &[usize]) -> SensorSet {
        SensorSet::from_indices(one_based.iter().map(|i| i - 1))
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn zero_when_all_equal() {
        let j = set(&[1, 2, 3]);
        let subs: BTreeMap<_, _> = subsets_within(j, 2).into_iter().map(|s| (s, v(&[1.0, 1.0]))).collect();
        assert_eq!(discrepancy_j(4, 1, j, &v(&[1.0, 1.0]), &subs).unwrap(), 0.0);
    }

    #[test]
    fn only_contained_subsets_are_used() {
        let j = set(&[1, 2, 3]);
        let subs = subsets_within(j, 2);
        assert_eq!(subs, vec![set(&[1, 2]), set(&[1, 3]), set(&[2, 3])]);
        let mut map: BTreeMap<_, _> = subs.into_iter().map(|s| (s, v(&[0.0, 0.0]))).collect();
        map.insert(set(&[1, 4]), v(&[0.0, 0.0]));
        assert!(matches!(
            discrepancy_j(4, 1, j, &v(&[0.0, 0.0]), &map),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn brute_force_norm_example() {
        let j = set(&[1, 2, 3]);
        let vals = [[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]];
        let map: BTreeMap<_, _> = subsets_within(j, 2)
            .into_iter()
            .zip(vals)
            .map(|(s, x)| (s, v(&x)))
            .collect();
        assert_eq!(discrepancy_j(4, 1, j, &v(&[0.0, 0.0]), &map).unwrap(), 2.0);
    }

    fn z_all(val: f64) -> BTreeMap<SensorSet, f64> {
        enumerate_subsets(4, 3).unwrap().into_iter().map(|s| (s, val)).collect()
    }

    #[test]
    fn union_cases() {
        let z = z_all(1.0);
        let pass: BTreeMap<_, _> = z.keys().map(|s| (*s, 1.0)).collect();
        assert_eq!(attack_free_union(&pass, &z), SensorSet::full(4));
        let fail: BTreeMap<_, _> = z.keys().map(|s| (*s, 1.5)).collect();
        assert_eq!(attack_free_union(&fail, &z), SensorSet::EMPTY);
        let mut some = fail.clone();
        some.insert(set(&[1, 2, 4]), 0.5);
        some.insert(set(&[1, 3, 4]), 0.5);
        // the union exceeds every single candidate
        assert_eq!(attack_free_union(&some, &z), set(&[1, 2, 3, 4]));
        let mut one = fail;
        one.insert(set(&[2, 3, 4]), 0.0);
        assert_eq!(attack_free_union(&one, &z), set(&[2, 3, 4]));
    }

    #[test]
    fn candidate_order() {
        let c = candidates(4, 1).unwrap();
        assert_eq!(
            c,
            vec![SensorSet::full(4), set(&[1, 2, 3]), set(&[1, 2, 4]), set(&[1, 3, 4]), set(&[2, 3, 4])]
        );
        assert_eq!(candidates(6, 2).unwrap().len(), 1 + 6 + 15);
    }

    fn win(n: usize) -> Window {
        Window {
            index: 1,
            start: 0,
            end: n - 1,
            partial: false,
        }
    }

    #[test]
    fn counting_and_selection() {
        let c = candidates(4, 1).unwrap();
        let unions = vec![
            set(&[1, 2, 4]),
            set(&[1, 2, 4]),
            SensorSet::full(4),
            SensorSet::EMPTY,
            set(&[1, 2]), // cannot arise for p = 4, q = 1; exercises the diagnostic
        ];
        let v = count_window(&c, &unions, win(5));
        assert_eq!(v.counters, vec![1, 0, 2, 0, 0]);
        assert_eq!(v.selected, Some(set(&[1, 2, 4])));
        assert_eq!(v.isolated(4), Some(set(&[3])));
        assert_eq!(v.empty_union, 1);
        assert_eq!(v.unmatched_union, 1);
        assert!(v.counters.iter().sum::<usize>() <= 5);
    }

    #[test]
    fn ties_prefer_larger_candidate() {
        let c = candidates(4, 1).unwrap();
        let unions = vec![set(&[1, 2, 4]), SensorSet::full(4)];
        let v = count_window(&c, &unions, win(2));
        assert_eq!(v.selected, Some(SensorSet::full(4)));
        assert_eq!(v.isolated(4), Some(SensorSet::EMPTY));
        let unions = vec![set(&[2, 3, 4]), set(&[1, 3, 4])];
        assert_eq!(count_window(&c, &unions, win(2)).selected, Some(set(&[1, 3, 4])));
    }

    #[test]
    fn all_zero_counters_are_inconclusive() {
        let c = candidates(4, 1).unwrap();
        let v = count_window(&c, &[SensorSet::EMPTY; 3], win(3));
        assert!(v.inconclusive());
        assert_eq!(v.isolated(4), None);
    }

    proptest! {
        #[test]
        fn enlarging_thresholds_grows_union(
            pis in proptest::collection::vec(0.0f64..2.0, 4),
            zs in proptest::collection::vec(0.0f64..2.0, 4),
            bump in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let subs = enumerate_subsets(4, 3).unwrap();
            let pi: BTreeMap<_, _> = subs.iter().copied().zip(pis).collect();
            let z: BTreeMap<_, _> = subs.iter().copied().zip(zs.iter().copied()).collect();
            let z2: BTreeMap<_, _> = subs.iter().copied().zip(zs.iter().zip(&bump).map(|(a, b)| a + b)).collect();
            let w1 = attack_free_union(&pi, &z);
            let w2 = attack_free_union(&pi, &z2);
            prop_assert!(w1.is_subset_of(w2));
        }

        #[test]
        fn counter_conservation(picks in proptest::collection::vec(0usize..8, 1..60)) {
            let c = candidates(4, 1).unwrap();
            let pool = [c[0], c[1], c[2], c[3], c[4], SensorSet::EMPTY, set(&[1]), set(&[2, 3])];
            let unions: Vec<SensorSet> = picks.iter().map(|&i| pool[i]).collect();
            let v = count_window(&c, &unions, win(unions.len()));
            let matched = unions.iter().filter(|u| c.contains(u)).count();
            prop_assert_eq!(v.counters.iter().sum::<usize>(), matched);
            prop_assert_eq!(matched + v.unmatched_union + v.empty_union, unions.len());
        }
    }
}
