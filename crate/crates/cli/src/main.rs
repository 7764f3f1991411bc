use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use multiobs::certify::{certify_bank, CertificateTable, ValidationReport};
use multiobs::design::{design_bank, DesignConfig};
use multiobs::io::{self, Artifacts};
use multiobs::observer::{build_bank, GainTable};
use multiobs::scenario::Scenario;
use multiobs::sim::{summarize, sweep, Pipeline, ScenarioRun};
use multiobs::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "multiobs", version, about = "Multi-observer sensor attack detection and isolation")]
struct Cli {
    /// More progress output on stderr (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Suppress the report on stdout.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate and validate ISS certificates for the whole bank.
    Certify(Common),
    /// Run windowed attack detection.
    Detect(Single),
    /// Run windowed attack isolation.
    Isolate(Single),
    /// Certify, then run detection and isolation on one trajectory.
    RunAll(Single),
    /// Run detection and isolation for several window sizes and seeds.
    Sweep(SweepArgs),
    /// Search observer gains for the scenario's bank.
    Design(DesignArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file.
    #[arg(long)]
    scenario: PathBuf,
    /// Gain file; defaults to the scenario's `files.gains`.
    #[arg(long)]
    gains: Option<PathBuf>,
    /// Certificate file; defaults to the scenario's `files.certificates`,
    /// certifying in-process when neither exists.
    #[arg(long)]
    certificates: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, env = "MULTIOBS_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    /// Master seed of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Actual-to-declared noise ratio, in (0, 1].
    #[arg(long)]
    tau: Option<f64>,
    /// Inflation applied to Monte-Carlo noise gains.
    #[arg(long = "safety-factor")]
    safety_factor: Option<f64>,
}

#[derive(Args, Debug)]
struct Single {
    #[command(flatten)]
    common: Common,
    /// Window length.
    #[arg(long = "N")]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Window lengths.
    #[arg(long = "N", value_delimiter = ',', default_value = "50,100,200")]
    windows: Vec<usize>,
    /// Explicit seeds; overrides --runs.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of consecutive seeds starting at the master seed.
    #[arg(long, default_value_t = 1)]
    runs: u64,
}

#[derive(Args, Debug)]
struct DesignArgs {
    #[command(flatten)]
    common: Common,
    /// Where to write the gain file; defaults to `<out>/gains.toml`.
    #[arg(long = "gains-out")]
    gains_out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    /// Monte-Carlo trials per scored candidate.
    #[arg(long)]
    trials: Option<usize>,
    /// Slowest admissible decay rate.
    #[arg(long = "max-lambda")]
    max_lambda: Option<f64>,
}

struct Ctx {
    verbose: u8,
    quiet: bool,
}

impl Ctx {
    fn log(&self, level: u8, msg: impl AsRef<str>) {
        if self.verbose >= level {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn report(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            print!("{}", msg.as_ref());
        }
    }
}

fn load_scenario(c: &Common) -> Result<Scenario> {
    let mut s = Scenario::load(&c.scenario)?;
    if let Some(h) = c.horizon {
        s = s.with_horizon(h)?;
    }
    if let Some(seed) = c.seed {
        s = s.with_seed(seed);
    }
    if let Some(tau) = c.tau {
        s = s.with_noise_scale(tau)?;
    }
    if let Some(f) = c.safety_factor {
        s = s.with_safety_factor(f)?;
    }
    Ok(s)
}

fn gains_path(c: &Common, s: &Scenario) -> Result<PathBuf> {
    c.gains
        .clone()
        .or_else(|| s.gains_path.clone())
        .ok_or_else(|| Error::config("--gains", "no gain file given and the scenario names none"))
}

fn load_gains(c: &Common, s: &Scenario) -> Result<GainTable> {
    io::load_gains(&gains_path(c, s)?, s.model.p())
}

fn certify(ctx: &Ctx, s: &Scenario, gains: &GainTable) -> Result<(CertificateTable, Vec<ValidationReport>)> {
    let bank = build_bank(&s.model, s.q, gains)?;
    ctx.log(1, format!("certifying {} observers", bank.len()));
    let noise = s.noise.with_scale(1.0)?;
    certify_bank(&bank, &s.model, &noise, &s.input, &s.certification)
}

/// Loads certificates when available, applying a safety-factor override;
/// otherwise certifies.
fn certificates(ctx: &Ctx, c: &Common, s: &Scenario, gains: &GainTable) -> Result<CertificateTable> {
    let path = c
        .certificates
        .clone()
        .or_else(|| s.certificates_path.clone().filter(|p| p.exists()));
    match path {
        Some(p) => {
            ctx.log(1, format!("loading certificates from {}", p.display()));
            let mut table = io::load_certificates(&p, s.model.p())?;
            if let Some(f) = c.safety_factor {
                for cert in table.values_mut() {
                    cert.safety_factor = f;
                    cert.gamma = cert.gamma_raw * f;
                }
            }
            Ok(table)
        }
        None => certify(ctx, s, gains).map(|(t, _)| t),
    }
}

fn validation_csv(certs: &CertificateTable, reports: &[ValidationReport]) -> Vec<u8> {
    let mut s = String::from("subset,samples,violations,rate\n");
    for ((set, _), r) in certs.iter().zip(reports) {
        s.push_str(&format!(
            "{},{},{},{}\n",
            set.to_list_string(),
            r.samples,
            r.violations,
            io::fmt_f64(r.rate())
        ));
    }
    s.into_bytes()
}

fn summary_report(run: &ScenarioRun) -> String {
    let m = &run.metrics;
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}%", 100.0 * v));
    format!(
        "{}: detection {} ({}/{}), false alarms {} ({}/{}), isolation exact {} ({}/{})\n",
        run.id,
        pct(m.detection_rate()),
        m.detected,
        m.attacked_windows,
        pct(m.false_alarm_rate()),
        m.false_alarms,
        m.clean_windows,
        pct(m.isolation_accuracy()),
        m.isolation_exact,
        m.isolation_windows,
    )
}

const DETECTION_ONLY: [&str; 2] = ["trace.csv", "detection.csv"];
const ISOLATION_ONLY: [&str; 3] = ["isolation_trace.csv", "wbar.csv", "isolation.csv"];

fn run_single(ctx: &Ctx, a: &Single, mode: &str) -> Result<()> {
    let mut s = load_scenario(&a.common)?;
    if let Some(n) = a.window {
        s = s.with_window(n)?;
    }
    if mode == "isolate" && s.q == 0 {
        return Err(Error::config("run.q", "isolation requires q >= 1"));
    }
    let gains = load_gains(&a.common, &s)?;
    let mut out = Artifacts::new();
    let certs = if mode == "run-all" {
        let (certs, reports) = certify(ctx, &s, &gains)?;
        out.add("certificates.toml", io::certificates_to_toml(&certs)?);
        out.add("validation.csv", validation_csv(&certs, &reports));
        certs
    } else {
        certificates(ctx, &a.common, &s, &gains)?
    };
    let mut pipe = Pipeline::new(&s, &gains, &certs)?;
    ctx.log(1, format!("simulating {} steps", s.horizon));
    let run = pipe.run(&s, s.seed, s.window)?;

    let mut all = Artifacts::new();
    io::run_artifacts(&run, "", &mut all)?;
    for name in all.names() {
        let keep = match mode {
            "detect" => !ISOLATION_ONLY.contains(&name),
            "isolate" => !DETECTION_ONLY.contains(&name),
            _ => true,
        };
        if keep {
            out.add(name, all.get(name).unwrap_or_default());
        }
    }
    let summary = summarize(std::slice::from_ref(&run.metrics))?;
    out.add("summary.csv", io::summary_csv(&summary)?);
    out.add("thresholds.csv", io::thresholds_csv(&pipe.thresholds)?);
    let written = out.write_to(&a.common.out)?;
    ctx.report(io::threshold_report(&pipe.thresholds));
    ctx.report(summary_report(&run));
    ctx.log(1, format!("wrote {} files to {}", written.len(), a.common.out.display()));
    Ok(())
}

fn run_certify(ctx: &Ctx, c: &Common) -> Result<()> {
    let s = load_scenario(c)?;
    let gains = load_gains(c, &s)?;
    let (certs, reports) = certify(ctx, &s, &gains)?;
    let thresholds = multiobs::certify::compute_thresholds(
        &certs,
        s.model.p(),
        s.q,
        s.noise.bound(),
        s.certification.epsilon,
    )?;
    let mut out = Artifacts::new();
    out.add("certificates.toml", io::certificates_to_toml(&certs)?);
    out.add("validation.csv", validation_csv(&certs, &reports));
    out.add("thresholds.csv", io::thresholds_csv(&thresholds)?);
    out.write_to(&c.out)?;
    for (set, cert) in &certs {
        ctx.log(
            1,
            format!(
                "{set}: c = {:.4}, lambda = {:.6}, gamma = {:.4}, k* = {}",
                cert.c, cert.lambda, cert.gamma, cert.k_star
            ),
        );
    }
    ctx.report(io::threshold_report(&thresholds));
    Ok(())
}

fn run_sweep(ctx: &Ctx, a: &SweepArgs) -> Result<()> {
    let s = load_scenario(&a.common)?;
    if a.windows.is_empty() || a.windows.contains(&0) {
        return Err(Error::config("--N", "window lengths must be >= 1"));
    }
    let seeds: Vec<u64> = match &a.seeds {
        Some(v) if !v.is_empty() => v.clone(),
        Some(_) => return Err(Error::config("--seeds", "must not be empty")),
        None => {
            if a.runs == 0 {
                return Err(Error::config("--runs", "must be >= 1"));
            }
            (0..a.runs).map(|i| s.seed.wrapping_add(i)).collect()
        }
    };
    let gains = load_gains(&a.common, &s)?;
    let certs = certificates(ctx, &a.common, &s, &gains)?;
    ctx.log(1, format!("{} runs", a.windows.len() * seeds.len()));
    let runs = sweep(&s, &gains, &certs, &a.windows, &seeds)?;
    let metrics: Vec<_> = runs.iter().map(|r| r.metrics.clone()).collect();
    let all = summarize(&metrics)?;
    let mut pooled = Vec::new();
    for &n in &a.windows {
        let rows: Vec<_> = metrics.iter().filter(|m| m.window == n).cloned().collect();
        let mut sm = summarize(&rows)?;
        sm.pooled.id = format!("pooled_N{n}");
        pooled.push(sm);
    }
    let mut out = Artifacts::new();
    out.add("summary.csv", io::summary_csv(&all)?);
    out.add("pooled.csv", io::pooled_csv(&pooled)?);
    out.write_to(&a.common.out)?;
    for r in &runs {
        ctx.log(1, summary_report(r));
    }
    for p in &pooled {
        let m = &p.pooled;
        let rate = m.detection_rate().or(m.false_alarm_rate());
        ctx.report(format!(
            "N = {}: detection/false-alarm rate {}, isolation exact {}\n",
            m.window,
            rate.map_or("n/a".into(), |v| format!("{:.4}", v)),
            m.isolation_accuracy().map_or("n/a".into(), |v| format!("{:.4}", v)),
        ));
    }
    Ok(())
}

fn run_design(ctx: &Ctx, a: &DesignArgs) -> Result<()> {
    let s = load_scenario(&a.common)?;
    let mut cfg = DesignConfig {
        seed: s.seed,
        ..DesignConfig::default()
    };
    if let Some(r) = a.rounds {
        cfg.rounds = r;
    }
    if let Some(c) = a.candidates {
        cfg.candidates = c;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(l) = a.max_lambda {
        cfg.max_lambda = l;
    }
    let noise = s.noise.with_scale(1.0)?;
    let (table, outcomes) = design_bank(&s.model, s.q, &noise, &s.input, &cfg)?;
    let mut report = String::from("subset,gamma_raw,lambda\n");
    for o in &outcomes {
        report.push_str(&format!(
            "{},{},{}\n",
            o.subset.to_list_string(),
            io::fmt_f64(o.gamma_raw),
            io::fmt_f64(o.lambda)
        ));
        ctx.log(1, format!("{}: gamma_raw = {:.4}, lambda = {:.5}", o.subset, o.gamma_raw, o.lambda));
    }
    let text = io::gains_to_toml(&table)?;
    let mut out = Artifacts::new();
    out.add("design.csv", report);
    match &a.gains_out {
        Some(path) => {
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let name = path
                .file_name()
                .ok_or_else(|| Error::config("--gains-out", "must name a file"))?;
            let mut g = Artifacts::new();
            g.add(name.to_string_lossy(), text);
            g.write_to(dir)?;
        }
        None => out.add("gains.toml", text),
    }
    out.write_to(&a.common.out)?;
    ctx.report(format!("designed gains for {} observers\n", outcomes.len()));
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let ctx = Ctx {
        verbose: cli.verbose,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Certify(c) => run_certify(&ctx, c),
        Command::Detect(a) => run_single(&ctx, a, "detect"),
        Command::Isolate(a) => run_single(&ctx, a, "isolate"),
        Command::RunAll(a) => run_single(&ctx, a, "run-all"),
        Command::Sweep(a) => run_sweep(&ctx, a),
        Command::Design(a) => run_design(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
