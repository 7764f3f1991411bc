//! Gain and certificate files, CSV artifacts and atomic writes.
//!
//! Floats are written with 17 significant digits so every value reads back
//! to the same `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::certify::{CertificateTable, IssCertificate, ThresholdSet};
use crate::error::{Error, Result};
use crate::observer::{GainTable, Gains};
use crate::sensors::SensorSet;
use crate::sim::{RunMetrics, ScenarioRun, Summary};

/// `f64` with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct GainEntry {
    subset: Vec<usize>,
    K: Vec<Vec<f64>>,
    L: Vec<Vec<f64>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainFile {
    #[serde(default)]
    observer: Vec<GainEntry>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateFile {
    #[serde(default)]
    certificate: Vec<IssCertificate>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, file: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        file: file.to_string(),
        message: e.to_string().trim_end().to_string(),
    })
}

fn to_matrix(path: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::config(
                format!("{path}[{}]", i + 1),
                format!("row {} has {} entries, expected {ncols}", i + 1, r.len()),
            ));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("{path}[{}]", i + 1), "entries must be finite"));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Parses a gain table. Shapes are checked when the bank is built.
pub fn parse_gains(text: &str, file: &str, p: usize) -> Result<GainTable> {
    let raw: GainFile = parse_toml(text, file)?;
    let mut table = GainTable::new();
    for (pos, e) in raw.observer.into_iter().enumerate() {
        let field = format!("observer[{pos}]");
        let s = SensorSet::from_one_based(&e.subset, p, &format!("{field}.subset"))?;
        if table.contains_key(&s) {
            return Err(Error::config(
                format!("{field}.subset"),
                format!("duplicate entry for {s}"),
            ));
        }
        let k = to_matrix(&format!("{field}.K"), &e.K)?;
        let l = to_matrix(&format!("{field}.L"), &e.L)?;
        table.insert(s, Gains { k, l });
    }
    Ok(table)
}

pub fn load_gains(path: &Path, p: usize) -> Result<GainTable> {
    parse_gains(&read(path)?, &path.display().to_string(), p)
}

pub fn gains_to_toml(table: &GainTable) -> Result<String> {
    let file = GainFile {
        observer: table
            .iter()
            .map(|(s, g)| GainEntry {
                subset: s.one_based(),
                K: rows(&g.k),
                L: rows(&g.l),
            })
            .collect(),
    };
    toml::to_string(&file).map_err(|e| Error::Invariant(format!("gain serialization: {e}")))
}

pub fn parse_certificates(text: &str, file: &str, p: usize) -> Result<CertificateTable> {
    let raw: CertificateFile = parse_toml(text, file)?;
    let mut table = CertificateTable::new();
    for (pos, c) in raw.certificate.into_iter().enumerate() {
        let s = SensorSet::from_one_based(&c.subset, p, &format!("certificate[{pos}].subset"))?;
        c.validate()?;
        if table.insert(s, c).is_some() {
            return Err(Error::config(
                format!("certificate[{pos}].subset"),
                format!("duplicate entry for {s}"),
            ));
        }
    }
    Ok(table)
}

pub fn load_certificates(path: &Path, p: usize) -> Result<CertificateTable> {
    parse_certificates(&read(path)?, &path.display().to_string(), p)
}

/// Certificates in bank-independent subset order.
pub fn certificates_to_toml(table: &CertificateTable) -> Result<String> {
    let mut list: Vec<IssCertificate> = table.values().cloned().collect();
    list.sort_by(|a, b| {
        b.subset
            .len()
            .cmp(&a.subset.len())
            .then_with(|| a.subset.cmp(&b.subset))
    });
    toml::to_string(&CertificateFile { certificate: list })
        .map_err(|e| Error::Invariant(format!("certificate serialization: {e}")))
}

/// Named files produced by one command.
#[derive(Debug, Default, Clone)]
pub struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), bytes.into());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    /// Writes every file to a temporary sibling, then renames them all into
    /// place. On failure the temporaries are removed and nothing is renamed.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pid = std::process::id();
        let mut staged = Vec::new();
        let cleanup = |staged: &[(PathBuf, PathBuf)]| {
            for (tmp, _) in staged {
                let _ = std::fs::remove_file(tmp);
            }
        };
        for (name, bytes) in &self.files {
            let dest = dir.join(name);
            let tmp = dir.join(format!(".{name}.{pid}.tmp"));
            if let Err(e) = std::fs::write(&tmp, bytes) {
                cleanup(&staged);
                let _ = std::fs::remove_file(&tmp);
                return Err(Error::io(&tmp, e));
            }
            staged.push((tmp, dest));
        }
        let mut written = Vec::new();
        for (i, (tmp, dest)) in staged.iter().enumerate() {
            if let Err(e) = std::fs::rename(tmp, dest) {
                cleanup(&staged[i..]);
                return Err(Error::io(dest, e));
            }
            written.push(dest.clone());
        }
        Ok(written)
    }
}

fn csv_bytes(header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Invariant(format!("csv encoding: {e}"));
    w.write_record(header).map_err(err)?;
    for r in records {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Invariant(format!("csv encoding: {e}")))
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

/// `k, pi, argmax_subset, z_bar, in_window, window_index`.
pub fn trace_csv(run: &ScenarioRun) -> Result<Vec<u8>> {
    let d = &run.detection;
    let limit = d.verdicts.last().map_or(0, |v| v.window.end + 1);
    csv_bytes(
        &["k", "pi", "argmax_subset", "z_bar", "in_window", "window_index"],
        d.trace.iter().map(|r| {
            let w = crate::detect::window_of(r.k, d.k_star, d.window_size).filter(|_| r.k < limit);
            vec![
                r.k.to_string(),
                fmt_f64(r.pi),
                r.argmax.to_list_string(),
                fmt_f64(d.z_bar),
                flag(w.is_some()),
                w.map_or(String::new(), |i| i.to_string()),
            ]
        }),
    )
}

/// `window_index, detection, first_trigger_k, partial`.
pub fn detection_csv(run: &ScenarioRun) -> Result<Vec<u8>> {
    csv_bytes(
        &["window_index", "detection", "first_trigger_k", "partial"],
        run.detection.verdicts.iter().map(|v| {
            vec![
                v.window.index.to_string(),
                flag(v.detected),
                v.first_trigger.map_or(String::new(), |k| k.to_string()),
                flag(v.window.partial),
            ]
        }),
    )
}

/// `k, J, pi_J, z_bar_J, pass`, one row per step and `p - q` subset.
pub fn isolation_trace_csv(run: &ScenarioRun) -> Result<Option<Vec<u8>>> {
    let Some(iso) = &run.isolation else {
        return Ok(None);
    };
    let mut recs = Vec::with_capacity(iso.trace.len() * iso.layer.len());
    for step in &iso.trace {
        for ((j, z), pi) in iso.layer.iter().zip(&iso.z_bar_j).zip(&step.pi_j) {
            recs.push(vec![
                step.k.to_string(),
                j.to_list_string(),
                fmt_f64(*pi),
                fmt_f64(*z),
                flag(pi <= z),
            ]);
        }
    }
    csv_bytes(&["k", "J", "pi_J", "z_bar_J", "pass"], recs).map(Some)
}

/// `k, W_bar`.
pub fn wbar_csv(run: &ScenarioRun) -> Result<Option<Vec<u8>>> {
    let Some(iso) = &run.isolation else {
        return Ok(None);
    };
    csv_bytes(
        &["k", "W_bar"],
        iso.trace
            .iter()
            .map(|s| vec![s.k.to_string(), s.w_bar.to_list_string()]),
    )
    .map(Some)
}

/// `window_index, J_selected, A_tilde, inconclusive, partial,
/// unmatched_union, empty_union, n_<candidate>...`.
pub fn isolation_csv(run: &ScenarioRun) -> Result<Option<Vec<u8>>> {
    let Some(iso) = &run.isolation else {
        return Ok(None);
    };
    let cand_cols: Vec<String> = iso
        .candidates
        .iter()
        .map(|c| format!("n_{}", c.one_based().iter().map(|i| i.to_string()).collect::<String>()))
        .collect();
    let mut header = vec![
        "window_index",
        "J_selected",
        "A_tilde",
        "inconclusive",
        "partial",
        "unmatched_union",
        "empty_union",
    ];
    header.extend(cand_cols.iter().map(String::as_str));
    csv_bytes(
        &header,
        iso.verdicts.iter().map(|v| {
            let mut r = vec![
                v.window.index.to_string(),
                v.selected.map_or(String::new(), |s| s.to_list_string()),
                v.isolated(iso.p).map_or(String::new(), |s| s.to_list_string()),
                flag(v.inconclusive()),
                flag(v.window.partial),
                v.unmatched_union.to_string(),
                v.empty_union.to_string(),
            ];
            r.extend(v.counters.iter().map(|c| c.to_string()));
            r
        }),
    )
    .map(Some)
}

/// `k, member_label, subset, xhat_1..xhat_n`.
pub fn bank_csv(run: &ScenarioRun) -> Result<Vec<u8>> {
    let n = run.trajectory.x.first().map_or(0, |x| x.len());
    let xcols: Vec<String> = (1..=n).map(|i| format!("xhat_{i}")).collect();
    let mut header = vec!["k", "member_label", "subset"];
    header.extend(xcols.iter().map(String::as_str));
    let mut recs = Vec::new();
    for (k, est) in run.trajectory.estimates.iter().enumerate() {
        for ((s, label), x) in run.members.iter().zip(est) {
            let mut r = vec![k.to_string(), label.to_string(), s.to_list_string()];
            r.extend(x.iter().map(|v| fmt_f64(*v)));
            recs.push(r);
        }
    }
    csv_bytes(&header, recs)
}

/// True state, measurement, attack and noise per step.
pub fn signals_csv(run: &ScenarioRun) -> Result<Vec<u8>> {
    let t = &run.trajectory;
    let n = t.x.first().map_or(0, |x| x.len());
    let p = t.y.first().map_or(0, |y| y.len());
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=p).map(|i| format!("y_{i}")));
    header.extend((1..=p).map(|i| format!("a_{i}")));
    header.extend((1..=p).map(|i| format!("m_{i}")));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(
        &h,
        (0..t.len()).map(|k| {
            let mut r = vec![k.to_string()];
            for v in [&t.x[k], &t.y[k], &t.a[k], &t.m[k]] {
                r.extend(v.iter().map(|c| fmt_f64(*c)));
            }
            r
        }),
    )
}

/// Window index against verdict, the axes of the detection and isolation
/// figures. Isolated sets are written as a sensor number, with 0 meaning
/// no sensor was isolated.
pub fn plot_csv(run: &ScenarioRun) -> Result<Vec<u8>> {
    let iso: BTreeMap<usize, String> = run
        .isolation
        .iter()
        .flat_map(|s| {
            s.verdicts.iter().map(move |v| {
                let label = match v.isolated(s.p) {
                    None => "inconclusive".to_string(),
                    Some(a) if a.is_empty() => "0".to_string(),
                    Some(a) => a.to_list_string(),
                };
                (v.window.index, label)
            })
        })
        .collect();
    let count = run
        .detection
        .verdicts
        .len()
        .max(iso.keys().next_back().copied().unwrap_or(0));
    csv_bytes(
        &["window_index", "detection", "isolated_sensor"],
        (1..=count).map(|i| {
            vec![
                i.to_string(),
                run.detection
                    .verdicts
                    .get(i - 1)
                    .map_or(String::new(), |v| flag(v.detected)),
                iso.get(&i).cloned().unwrap_or_default(),
            ]
        }),
    )
}

fn rate(v: Option<f64>) -> String {
    v.map_or(String::new(), fmt_f64)
}

const SUMMARY_HEADER: [&str; 16] = [
    "run",
    "seed",
    "N",
    "attacked",
    "attacked_windows",
    "detected",
    "detection_rate",
    "clean_windows",
    "false_alarms",
    "false_alarm_rate",
    "isolation_windows",
    "isolation_exact",
    "isolation_accuracy",
    "isolation_superset",
    "isolation_superset_rate",
    "isolation_inconclusive",
];

fn metrics_record(m: &RunMetrics) -> Vec<String> {
    vec![
        m.id.clone(),
        m.seed.to_string(),
        m.window.to_string(),
        m.attacked.to_list_string(),
        m.attacked_windows.to_string(),
        m.detected.to_string(),
        rate(m.detection_rate()),
        m.clean_windows.to_string(),
        m.false_alarms.to_string(),
        rate(m.false_alarm_rate()),
        m.isolation_windows.to_string(),
        m.isolation_exact.to_string(),
        rate(m.isolation_accuracy()),
        m.isolation_superset.to_string(),
        rate(m.isolation_superset_rate()),
        m.isolation_inconclusive.to_string(),
    ]
}

/// One row per run.
pub fn summary_csv(summary: &Summary) -> Result<Vec<u8>> {
    csv_bytes(&SUMMARY_HEADER, summary.rows.iter().map(metrics_record))
}

/// One pooled row per summary.
pub fn pooled_csv<'a>(summaries: impl IntoIterator<Item = &'a Summary>) -> Result<Vec<u8>> {
    csv_bytes(
        &SUMMARY_HEADER,
        summaries.into_iter().map(|s| metrics_record(&s.pooled)),
    )
}

/// `kind, subset, value`: `z̄`, every `z̄_J`, `k⋆` and `k̄*`.
pub fn thresholds_csv(t: &ThresholdSet) -> Result<Vec<u8>> {
    let mut recs = vec![
        vec!["z_bar".into(), String::new(), fmt_f64(t.z_bar)],
        vec!["gamma_bar".into(), String::new(), fmt_f64(t.gamma_bar)],
    ];
    for (j, z) in &t.z_bar_j {
        recs.push(vec!["z_bar_J".into(), j.to_list_string(), fmt_f64(*z)]);
    }
    for (j, g) in &t.gamma_prime_j {
        recs.push(vec!["gamma_prime_J".into(), j.to_list_string(), fmt_f64(*g)]);
    }
    recs.push(vec!["k_star".into(), String::new(), t.k_star_detect.to_string()]);
    recs.push(vec!["k_bar_star".into(), String::new(), t.k_star_isolate.to_string()]);
    csv_bytes(&["kind", "subset", "value"], recs)
}

/// Human-readable threshold report.
pub fn threshold_report(t: &ThresholdSet) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "z_bar      = {}", t.z_bar);
    for (j, z) in &t.z_bar_j {
        let _ = writeln!(s, "z_bar_J {j:<10} = {z}");
    }
    let _ = writeln!(s, "k_star     = {}", t.k_star_detect);
    let _ = writeln!(s, "k_bar_star = {}", t.k_star_isolate);
    s
}

/// Every per-run artifact under its file name, optionally prefixed.
pub fn run_artifacts(run: &ScenarioRun, prefix: &str, out: &mut Artifacts) -> Result<()> {
    out.add(format!("{prefix}trace.csv"), trace_csv(run)?);
    out.add(format!("{prefix}detection.csv"), detection_csv(run)?);
    out.add(format!("{prefix}bank.csv"), bank_csv(run)?);
    out.add(format!("{prefix}signals.csv"), signals_csv(run)?);
    out.add(format!("{prefix}plot.csv"), plot_csv(run)?);
    if let Some(b) = isolation_trace_csv(run)? {
        out.add(format!("{prefix}isolation_trace.csv"), b);
    }
    if let Some(b) = wbar_csv(run)? {
        out.add(format!("{prefix}wbar.csv"), b);
    }
    if let Some(b) = isolation_csv(run)? {
        out.add(format!("{prefix}isolation.csv"), b);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 12345.678901234567, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
            let mantissa = s.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn gains_round_trip() {
        let mut t = GainTable::new();
        t.insert(
            SensorSet::from_indices([0, 2]),
            Gains {
                k: DMatrix::from_row_slice(1, 2, &[0.1, -1.0 / 3.0]),
                l: DMatrix::from_row_slice(2, 2, &[1e-17, 2.0, 3.0, 4.0]),
            },
        );
        let text = gains_to_toml(&t).unwrap();
        assert_eq!(parse_gains(&text, "g", 4).unwrap(), t);
    }

    #[test]
    fn ragged_gain_row_is_named() {
        let text = "[[observer]]\nsubset = [1]\nK = [[1.0]]\nL = [[1.0], [1.0, 2.0]]\n";
        match parse_gains(text, "g", 4).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "observer[0].L[2]"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn certificates_round_trip() {
        let c = IssCertificate {
            subset: vec![1, 2, 4],
            c: 1.7,
            lambda: 0.93,
            gamma: 2.0 / 3.0,
            gamma_raw: 5.0 / 9.0,
            epsilon: 0.0,
            k_star: 0,
            init_error_radius: 0.0,
            master_seed: u64::MAX,
            trials: 10,
            horizon: 100,
            safety_factor: 1.2,
        };
        let mut t = CertificateTable::new();
        t.insert(SensorSet::from_indices([0, 1, 3]), c);
        let text = certificates_to_toml(&t).unwrap();
        assert_eq!(parse_certificates(&text, "c", 4).unwrap(), t);
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::new();
        a.add("a.csv", "x\n");
        a.add("b.csv", "y\n");
        a.write_to(dir.path()).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["a.csv", "b.csv"]);
    }
}
