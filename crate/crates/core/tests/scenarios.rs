use std::path::PathBuf;

use multiobs::io;
use multiobs::observer::build_bank;
use multiobs::scenario::Scenario;
use multiobs::sensors::SensorSet;
use multiobs::sim::Pipeline;
use multiobs::Error;

const NAMES: [&str; 5] = [
    "attack_free",
    "detect_c07",
    "detect_c1",
    "isolate_d2",
    "isolate_d5",
];

fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("example1_{name}.toml"))
}

fn load(name: &str) -> Scenario {
    Scenario::load(&path(name)).unwrap()
}

#[test]
fn shipped_scenarios_share_the_plant_and_files() {
    let base = load("attack_free");
    for name in NAMES {
        let s = load(name);
        assert_eq!(s.model, base.model, "{name}");
        assert_eq!((s.horizon, s.q, s.model.p()), (1000, 1, 4), "{name}");
        assert_eq!(s.noise.bound(), 0.5);
        assert_eq!(s.gains_path, base.gains_path);
        assert_eq!(s.certificates_path, base.certificates_path);
    }
    assert!(base.attack.attacked().is_empty());
    assert_eq!(load("detect_c1").attack.attacked(), SensorSet::from_indices([1]));
    assert_eq!(load("isolate_d5").attack.attacked(), SensorSet::from_indices([2]));
}

#[test]
fn shipped_gains_and_certificates_cover_the_bank() {
    let s = load("attack_free");
    let gains = io::load_gains(s.gains_path.as_ref().unwrap(), 4).unwrap();
    let certs = io::load_certificates(s.certificates_path.as_ref().unwrap(), 4).unwrap();
    let bank = build_bank(&s.model, s.q, &gains).unwrap();
    assert_eq!(bank.len(), 11);
    for m in bank.members() {
        let c = &certs[&m.subset()];
        assert!(c.gamma.is_finite() && c.gamma > 0.0);
        assert!(c.lambda > 0.0 && c.lambda < 1.0);
        assert_eq!(c.epsilon, 0.0);
        assert_eq!(c.k_star, 0);
    }
}

#[test]
fn complete_window_count_matches_horizon() {
    let s = load("detect_c07");
    let gains = io::load_gains(s.gains_path.as_ref().unwrap(), 4).unwrap();
    let certs = io::load_certificates(s.certificates_path.as_ref().unwrap(), 4).unwrap();
    let mut pipe = Pipeline::new(&s, &gains, &certs).unwrap();
    for n in [50, 100, 200, 300] {
        let run = pipe.run(&s, 1, n).unwrap();
        let k_star = run.thresholds.k_star_detect;
        assert_eq!(run.detection.complete_verdicts().count(), (1000 - k_star) / n, "N = {n}");
        assert_eq!(run.metrics.attacked_windows, (1000 - k_star) / n);
        let partial = run.detection.verdicts.iter().filter(|v| v.window.partial).count();
        assert_eq!(partial, usize::from(!(1000 - k_star).is_multiple_of(n)));
    }
}

#[test]
fn zero_horizon_is_rejected() {
    assert!(load("detect_c07").with_horizon(0).is_err());
    let text = std::fs::read_to_string(path("detect_c07"))
        .unwrap()
        .replace("horizon = 1000", "horizon = 0");
    match Scenario::parse(&text, "zero.toml", None) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "run.horizon"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn horizon_shorter_than_one_window_is_rejected() {
    let s = load("detect_c07").with_horizon(150).unwrap();
    let gains = io::load_gains(s.gains_path.as_ref().unwrap(), 4).unwrap();
    let certs = io::load_certificates(s.certificates_path.as_ref().unwrap(), 4).unwrap();
    let mut pipe = Pipeline::new(&s, &gains, &certs).unwrap();
    assert!(pipe.run(&s, 1, 100).is_ok());
    assert!(matches!(pipe.run(&s, 1, 200), Err(Error::Config { .. })));
}

#[test]
fn missing_gains_are_enumerated() {
    let s = load("attack_free");
    let mut gains = io::load_gains(s.gains_path.as_ref().unwrap(), 4).unwrap();
    gains.remove(&SensorSet::from_indices([0, 1]));
    gains.remove(&SensorSet::from_indices([1, 2, 3]));
    match build_bank(&s.model, s.q, &gains) {
        Err(Error::MissingGains(list)) => {
            assert_eq!(list.len(), 2);
            let joined = list.join(" ");
            assert!(joined.contains("1, 2") || joined.contains("1,2"), "{joined}");
        }
        other => panic!("expected missing gains, got {other:?}"),
    }
}
