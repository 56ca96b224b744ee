//! Thin adapters from the configuration to the core experiments.

use std::path::{Path, PathBuf};

use drainage_core::analytics::{self, TailPoint, TailReport};
use drainage_core::bw::{bm_pair_survival, bw_meet_survival, BmPairSpec};
use drainage_core::coupling::{verify_monotonicity, MonotonicityReport};
use drainage_core::exact::to_f64;
use drainage_core::mc::{self, EtaReport, ExperimentConfig};
use drainage_core::stats::proportion_stderr;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{self, num, write_csv, write_json, RunManifest};
use crate::{Cli, CliError, Command, EXIT_OK, EXIT_STATISTICAL};

/// Tolerance between the closed-form and the enumerated increment law.
pub const EXACT_TOL: f64 = 1e-10;
/// Sampling tolerance, in null standard errors, for the increment law.
pub const INCREMENT_SIGMAS: f64 = 4.0;
/// Finite-N slack allowed between lattice frequencies and Brownian limits.
pub const LIMIT_SLACK: f64 = 0.02;
/// Slack for the Euler discretization of the Brownian pair.
pub const EULER_SLACK: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub outputs: Vec<PathBuf>,
    /// One line per check, for the terminal.
    pub summary: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_STATISTICAL
        }
    }
}

/// Loads the configuration, runs one command and writes its files plus a
/// manifest into the output directory.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let started = output::now_rfc3339();
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.global.seed, cli.global.workers);
    cfg.validate()?;
    let out = cli.global.out.as_path();
    output::ensure_dir(out)?;
    let mut outcome = execute(cli.command, &cfg, out)?;
    let manifest_path = out.join(format!("{}_manifest.json", cli.command.stem()));
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.command.name().to_string(),
        config_hash: cfg.config_hash(),
        master_seed: cfg.experiment.master_seed,
        workers: cfg.experiment.workers,
        config: cfg,
        started,
        finished: output::now_rfc3339(),
        outputs: outcome.outputs.clone(),
        passed: outcome.passed,
        exit_code: outcome.exit_code(),
    };
    write_json(&manifest_path, &manifest)?;
    outcome.outputs.push(manifest_path);
    Ok(outcome)
}

pub fn execute(command: Command, cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    match command {
        Command::IncrementCheck => increment_check(cfg, out),
        Command::TauTail => tau_tail(cfg, out),
        Command::Eta => eta(cfg, out),
        Command::Marginal => marginal(cfg, out),
        Command::BwCompare => bw_compare(cfg, out),
        Command::CouplingVerify => coupling_verify(cfg, out),
    }
}

fn tag(cfg: &RunConfig) -> [String; 2] {
    [cfg.experiment.master_seed.to_string(), cfg.config_hash()]
}

fn with_tag(mut row: Vec<String>, tag: &[String; 2]) -> Vec<String> {
    row.extend(tag.iter().cloned());
    row
}

fn increment_check(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let exp = &cfg.experiment;
    let p = exp.p;
    let k_max = cfg.increment_check.k_max;
    let radius = analytics::truncation_radius(p)?.max(k_max + 1);
    let exact = analytics::enumerate_increment_law(p, radius)?;
    let sample = mc::estimate_increments(exp)?;
    let tag = tag(cfg);
    let mut rows = Vec::new();
    let (mut worst_exact, mut worst_sigma) = (0.0f64, 0.0f64);
    for k in -k_max..=k_max {
        let closed = analytics::increment_pmf(p, k)?;
        let enumerated = exact.pmf.get(&k).map(to_f64).unwrap_or(0.0);
        let freq = sample.frequency(k).value;
        // null standard error, so rare cells with no hits are judged fairly
        let se = proportion_stderr(closed, sample.n);
        worst_exact = worst_exact.max((closed - enumerated).abs());
        if se > 0.0 {
            worst_sigma = worst_sigma.max((freq - closed).abs() / se);
        } else if freq != closed {
            worst_sigma = f64::INFINITY;
        }
        rows.push(with_tag(
            vec![k.to_string(), num(closed), num(enumerated), num(freq), num(se)],
            &tag,
        ));
    }
    let path = out.join("increment_check.csv");
    write_csv(
        &path,
        &["k", "closed_form", "enumerated", "mc", "stderr", "seed", "config_hash"],
        &rows,
    )?;
    let exact_ok = worst_exact <= EXACT_TOL;
    let mc_ok = worst_sigma <= INCREMENT_SIGMAS;
    Ok(Outcome {
        passed: exact_ok && mc_ok,
        outputs: vec![path],
        summary: vec![
            format!("closed form vs enumeration: max |diff| = {worst_exact:.3e} (tol {EXACT_TOL:e})"),
            format!(
                "sampled frequencies: max deviation {worst_sigma:.2} sigma over {} hops (tol {INCREMENT_SIGMAS})",
                sample.n
            ),
        ],
    })
}

#[derive(Debug, Serialize)]
struct TauTailReport<'a> {
    separation: i64,
    replicates: u64,
    failures: u64,
    slope_window: (f64, f64),
    #[serde(flatten)]
    report: &'a TailReport,
    seed: u64,
    config_hash: String,
}

/// CSV rows `t,survival,stderr,sqrt_t_survival` and the slope report for a
/// survival series.
pub fn tail_rows(points: &[TailPoint]) -> Result<(Vec<Vec<String>>, TailReport), CliError> {
    let report = analytics::tail_exponent_check(points)?;
    let rows = points
        .iter()
        .zip(&report.sqrt_t_survival)
        .map(|(pt, &s)| vec![num(pt.t), num(pt.survival), num(pt.stderr), num(s)])
        .collect();
    Ok((rows, report))
}

pub const TAU_TAIL_HEADER: [&str; 4] = ["t", "survival", "stderr", "sqrt_t_survival"];

/// Horizons used when the config lists none: half-decades from 10^2 to 10^4.
pub const DEFAULT_HORIZONS: [u64; 5] = [100, 316, 1000, 3162, 10_000];

fn tau_tail(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let mut exp = cfg.experiment.clone();
    if exp.horizons.is_empty() {
        exp.horizons = DEFAULT_HORIZONS.to_vec();
    }
    let exp = &exp;
    let sep = cfg.tau_tail.separation;
    let tail = mc::estimate_tau_tail(exp, sep)?;
    let (rows, report) = tail_rows(&tail.tail_points())?;
    let csv = out.join("tau_tail.csv");
    write_csv(&csv, &TAU_TAIL_HEADER, &rows)?;
    let json = out.join("tau_tail_report.json");
    write_json(
        &json,
        &TauTailReport {
            separation: sep,
            replicates: exp.replicates,
            failures: tail.failures,
            slope_window: analytics::SLOPE_WINDOW,
            report: &report,
            seed: exp.master_seed,
            config_hash: cfg.config_hash(),
        },
    )?;
    let mut summary = vec![format!(
        "log-log slope {:.4} (window {:?}), sqrt(t) P(tau > t) bounded: {}",
        report.slope,
        analytics::SLOPE_WINDOW,
        report.bounded
    )];
    summary.extend(report.notes.iter().cloned());
    Ok(Outcome {
        passed: report.pass,
        outputs: vec![csv, json],
        summary,
    })
}

/// One epsilon of the crowding sweep.
fn eta_config(exp: &ExperimentConfig, epsilon: f64) -> ExperimentConfig {
    ExperimentConfig {
        epsilon,
        ..exp.clone()
    }
}

pub const ETA_HEADER: [&str; 19] = [
    "epsilon",
    "t",
    "width",
    "steps",
    "eta_ge2",
    "eta_ge2_stderr",
    "reference_ge2",
    "eta_ge3",
    "eta_ge3_stderr",
    "eta_ge3_over_epsilon",
    "eta_ge3_over_epsilon_stderr",
    "boundary_survival",
    "left_half_survival",
    "right_half_survival",
    "half_product",
    "both_halves_survival",
    "failures",
    "seed",
    "config_hash",
];

/// Whether the sampled `P(eta >= 2)` is within `3 stderr + LIMIT_SLACK` of
/// its limit. Degenerate intervals (width 0 or no steps) are not judged.
pub fn eta_limit_ok(r: &EtaReport) -> Option<bool> {
    (r.width >= 1 && r.steps >= 1)
        .then(|| (r.eta_ge2.value - r.reference_ge2).abs() < 3.0 * r.eta_ge2.stderr + LIMIT_SLACK)
}

/// `P(eta >= 3) / eps` must not grow, beyond three combined standard
/// errors, as eps shrinks. Reports are taken in any order.
pub fn eta_trend_ok(reports: &[EtaReport]) -> bool {
    let mut rs: Vec<&EtaReport> = reports.iter().collect();
    rs.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    rs.windows(2).all(|w| {
        let (big, small) = (w[0], w[1]);
        let (rb, rs) = (big.eta_ge3.value / big.epsilon, small.eta_ge3.value / small.epsilon);
        let se = (big.eta_ge3.stderr / big.epsilon).hypot(small.eta_ge3.stderr / small.epsilon);
        rs <= rb + 3.0 * se
    })
}

fn eta(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let exp = &cfg.experiment;
    let eps: Vec<f64> = if cfg.eta.epsilons.is_empty() {
        vec![exp.epsilon]
    } else {
        cfg.eta.epsilons.clone()
    };
    let tag = tag(cfg);
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut passed = true;
    for &e in &eps {
        let r = mc::eta_report(&eta_config(exp, e))?;
        rows.push(with_tag(
            vec![
                num(r.epsilon),
                num(r.t),
                r.width.to_string(),
                r.steps.to_string(),
                num(r.eta_ge2.value),
                num(r.eta_ge2.stderr),
                num(r.reference_ge2),
                num(r.eta_ge3.value),
                num(r.eta_ge3.stderr),
                num(r.eta_ge3.value / e),
                num(r.eta_ge3.stderr / e),
                num(r.boundary_survival.value),
                num(r.left_half_survival.value),
                num(r.right_half_survival.value),
                num(r.half_product),
                num(r.both_halves_survival.value),
                r.failures.to_string(),
            ],
            &tag,
        ));
        match eta_limit_ok(&r) {
            Some(ok) => {
                passed &= ok;
                summary.push(format!(
                    "eps {e}: P(eta >= 2) = {:.4} +- {:.4}, limit {:.4}: {}",
                    r.eta_ge2.value,
                    r.eta_ge2.stderr,
                    r.reference_ge2,
                    if ok { "ok" } else { "FAIL" }
                ));
            }
            None => summary.push(format!("eps {e}: lattice interval of width {} not judged", r.width)),
        }
        reports.push(r);
    }
    if reports.len() > 1 {
        let ok = eta_trend_ok(&reports);
        passed &= ok;
        summary.push(format!(
            "P(eta >= 3)/eps non-increasing as eps shrinks: {}",
            if ok { "ok" } else { "FAIL" }
        ));
    }
    let path = out.join("eta.csv");
    write_csv(&path, &ETA_HEADER, &rows)?;
    Ok(Outcome {
        passed,
        outputs: vec![path],
        summary,
    })
}

fn marginal(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let r = mc::estimate_marginal(&cfg.experiment)?;
    let tag = tag(cfg);
    let path = out.join("marginal.csv");
    write_csv(
        &path,
        &[
            "t",
            "steps",
            "n",
            "mean",
            "variance",
            "ks_distance",
            "ks_threshold",
            "pass",
            "failures",
            "seed",
            "config_hash",
        ],
        &[with_tag(
            vec![
                num(r.t),
                r.steps.to_string(),
                r.samples.len().to_string(),
                num(r.mean),
                num(r.variance),
                num(r.ks_distance),
                num(r.ks_threshold),
                r.pass.to_string(),
                r.failures.to_string(),
            ],
            &tag,
        )],
    )?;
    let samples = out.join("marginal_samples.csv");
    let rows: Vec<Vec<String>> = r
        .samples
        .iter()
        .enumerate()
        .map(|(i, &x)| with_tag(vec![i.to_string(), num(x)], &tag))
        .collect();
    write_csv(&samples, &["replicate", "value", "seed", "config_hash"], &rows)?;
    Ok(Outcome {
        passed: r.pass,
        outputs: vec![path, samples],
        summary: vec![format!(
            "KS distance {:.5} against threshold {:.5} over {} endpoints",
            r.ks_distance,
            r.ks_threshold,
            r.samples.len()
        )],
    })
}

fn bw_compare(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let mut exp = cfg.experiment.clone();
    if exp.times.is_empty() {
        exp.times = vec![exp.t];
    }
    let lattice = mc::estimate_pair_meeting_scaled(&exp)?;
    let reps = cfg.bw_compare.replicates.unwrap_or(exp.replicates);
    let tag = tag(cfg);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut passed = true;
    for row in &lattice.rows {
        let (bm, bm_se, reference) = if row.t > 0.0 {
            let spec = BmPairSpec::unit(exp.epsilon, row.t);
            let step = cfg.bw_compare.step.unwrap_or(1e-4 * row.t);
            let est = bm_pair_survival(&spec, step, reps, exp.master_seed, exp.workers)?;
            (est.survival, est.stderr, bw_meet_survival(&spec)?)
        } else {
            (1.0, 0.0, 1.0)
        };
        let lat = &row.survival;
        let lat_ok = (lat.value - reference).abs() <= 3.0 * lat.stderr + LIMIT_SLACK;
        let bm_ok = (bm - reference).abs() <= 4.0 * bm_se + EULER_SLACK;
        passed &= lat_ok && bm_ok;
        summary.push(format!(
            "t {}: lattice {:.4}, brownian {:.4}, limit {:.6}: {}",
            row.t,
            lat.value,
            bm,
            reference,
            if lat_ok && bm_ok { "ok" } else { "FAIL" }
        ));
        rows.push(with_tag(
            vec![
                num(exp.epsilon),
                num(row.t),
                row.steps.to_string(),
                lattice.width.to_string(),
                num(lat.value),
                num(lat.stderr),
                num(bm),
                num(bm_se),
                num(reference),
            ],
            &tag,
        ));
    }
    let path = out.join("bw_compare.csv");
    write_csv(
        &path,
        &[
            "epsilon",
            "t",
            "steps",
            "width",
            "lattice_survival",
            "lattice_stderr",
            "bm_survival",
            "bm_stderr",
            "reference",
            "seed",
            "config_hash",
        ],
        &rows,
    )?;
    Ok(Outcome {
        passed,
        outputs: vec![path],
        summary,
    })
}

#[derive(Debug, Serialize)]
struct CouplingFile<'a> {
    passed: bool,
    #[serde(flatten)]
    report: &'a MonotonicityReport,
    seed: u64,
    config_hash: String,
}

fn coupling_verify(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let opts = cfg.coupling_verify.options(cfg.experiment.workers);
    let report = verify_monotonicity(&opts)?;
    let path = out.join("coupling_report.json");
    write_json(
        &path,
        &CouplingFile {
            passed: report.passed(),
            report: &report,
            seed: cfg.experiment.master_seed,
            config_hash: cfg.config_hash(),
        },
    )?;
    let mut summary: Vec<String> = report
        .grids
        .iter()
        .map(|g| format!("grid {}x{}: {} paths, {} canonical pairs", g.width, g.height, g.paths, g.pairs))
        .collect();
    summary.push(format!("{} violations", report.violations.len()));
    for o in &report.observations {
        summary.push(format!(
            "observed {:?} ({:?}, {:?}) {} times",
            o.check, o.case, o.reading, o.occurrences
        ));
    }
    Ok(Outcome {
        passed: report.passed(),
        outputs: vec![path],
        summary,
    })
}
