//! Sensor subsets and the stacking (restriction) operation.
//!
//! Subsets are stored as bitmasks over zero-based sensor indices. Every
//! user-facing rendering (`Display`, file formats) is one-based.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest supported sensor count.
pub const MAX_SENSORS: usize = 64;

/// A subset of `{1, ..., p}`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SensorSet(u64);

impl SensorSet {
    pub const EMPTY: SensorSet = SensorSet(0);

    /// The full set `{1, ..., p}`.
    pub fn full(p: usize) -> Self {
        assert!(p <= MAX_SENSORS, "at most {MAX_SENSORS} sensors supported");
        if p == MAX_SENSORS {
            SensorSet(u64::MAX)
        } else {
            SensorSet((1u64 << p) - 1)
        }
    }

    pub fn from_bits(bits: u64) -> Self {
        SensorSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    /// Builds a set from zero-based indices.
    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        let mut bits = 0u64;
        for i in indices {
            assert!(i < MAX_SENSORS, "sensor index {i} out of range");
            bits |= 1 << i;
        }
        SensorSet(bits)
    }

    /// Builds a set from one-based indices, validating them against `p`.
    pub fn from_one_based(indices: &[usize], p: usize, field: &str) -> Result<Self> {
        let mut bits = 0u64;
        for (pos, &i) in indices.iter().enumerate() {
            if i == 0 || i > p {
                return Err(Error::config(
                    format!("{field}[{pos}]"),
                    format!("sensor index {i} outside 1..={p}"),
                ));
            }
            if bits & (1 << (i - 1)) != 0 {
                return Err(Error::config(
                    format!("{field}[{pos}]"),
                    format!("duplicate sensor index {i}"),
                ));
            }
            bits |= 1 << (i - 1);
        }
        Ok(SensorSet(bits))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, i: usize) -> bool {
        i < MAX_SENSORS && self.0 & (1 << i) != 0
    }

    pub fn union(self, other: SensorSet) -> SensorSet {
        SensorSet(self.0 | other.0)
    }

    pub fn intersection(self, other: SensorSet) -> SensorSet {
        SensorSet(self.0 & other.0)
    }

    /// Elements of `universe` not in `self`.
    pub fn complement_in(self, universe: SensorSet) -> SensorSet {
        SensorSet(universe.0 & !self.0)
    }

    pub fn is_subset_of(self, other: SensorSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Zero-based indices in ascending order.
    pub fn indices(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let i = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(i)
            }
        })
    }

    pub fn one_based(self) -> Vec<usize> {
        self.indices().map(|i| i + 1).collect()
    }

    /// Space-separated one-based indices, e.g. `1 2 4`. Empty set renders
    /// as the empty string.
    pub fn to_list_string(self) -> String {
        self.one_based()
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`SensorSet::to_list_string`].
    pub fn parse_list(s: &str, p: usize) -> Result<Self> {
        let mut idx = Vec::new();
        for tok in s.split_whitespace() {
            let v: usize = tok
                .parse()
                .map_err(|_| Error::config("subset", format!("bad sensor index `{tok}`")))?;
            idx.push(v);
        }
        SensorSet::from_one_based(&idx, p, "subset")
    }
}

/// Lexicographic order on the ascending index lists.
impl Ord for SensorSet {
    fn cmp(&self, other: &Self) -> Ordering {
        let mut a = self.indices();
        let mut b = other.indices();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ordering::Equal,
                (None, Some(_)) => return Ordering::Less,
                (Some(_), None) => return Ordering::Greater,
                (Some(x), Some(y)) => match x.cmp(&y) {
                    Ordering::Equal => continue,
                    o => return o,
                },
            }
        }
    }
}

impl PartialOrd for SensorSet {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SensorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, i) in self.indices().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        write!(f, "}}")
    }
}

impl fmt::Debug for SensorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// All subsets of `{1, ..., p}` with the given cardinality, in ascending
/// lexicographic order.
pub fn enumerate_subsets(p: usize, cardinality: usize) -> Result<Vec<SensorSet>> {
    if p == 0 || p > MAX_SENSORS {
        return Err(Error::config("p", format!("sensor count {p} outside 1..={MAX_SENSORS}")));
    }
    if cardinality == 0 || cardinality > p {
        return Err(Error::config(
            "cardinality",
            format!("cardinality {cardinality} outside 1..={p}"),
        ));
    }
    let mut out = Vec::new();
    let mut combo: Vec<usize> = (0..cardinality).collect();
    loop {
        out.push(SensorSet::from_indices(combo.iter().copied()));
        // advance to the next combination in lexicographic order
        let mut i = cardinality;
        while i > 0 && combo[i - 1] == p - cardinality + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        combo[i - 1] += 1;
        for j in i..cardinality {
            combo[j] = combo[j - 1] + 1;
        }
    }
    Ok(out)
}

/// Subsets of `parent` with the given cardinality, lexicographic order.
pub fn subsets_within(parent: SensorSet, cardinality: usize) -> Vec<SensorSet> {
    let idx: Vec<usize> = parent.indices().collect();
    if cardinality == 0 || cardinality > idx.len() {
        return Vec::new();
    }
    enumerate_subsets(idx.len(), cardinality)
        .expect("cardinality checked above")
        .into_iter()
        .map(|local| SensorSet::from_indices(local.indices().map(|k| idx[k])))
        .collect()
}

/// Binomial coefficient.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

fn check_subset(j: SensorSet, p: usize) -> Result<()> {
    if j.is_empty() {
        return Err(Error::config("subset", "empty sensor subset"));
    }
    if !j.is_subset_of(SensorSet::full(p)) {
        return Err(Error::config(
            "subset",
            format!("subset {j} has indices beyond p = {p}"),
        ));
    }
    Ok(())
}

/// Stacks the entries of `v` indexed by `j` in ascending order.
pub fn restrict(v: &DVector<f64>, j: SensorSet) -> Result<DVector<f64>> {
    check_subset(j, v.len())?;
    Ok(DVector::from_iterator(j.len(), j.indices().map(|i| v[i])))
}

/// Stacks the rows of `m` indexed by `j` in ascending order.
pub fn restrict_rows(m: &DMatrix<f64>, j: SensorSet) -> Result<DMatrix<f64>> {
    check_subset(j, m.nrows())?;
    let rows: Vec<usize> = j.indices().collect();
    Ok(m.select_rows(rows.iter()))
}
