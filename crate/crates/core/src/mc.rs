//! Replicated Monte Carlo experiments.
//!
//! Every replicate owns one [`Environment`] seeded from the master seed and
//! its index, and aggregation only ever combines integer counts or ordered
//! sample vectors. Results are therefore identical for any worker count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{self, AnalyticsError};
use crate::bw::{bw_meet_survival, BmPairSpec};
use crate::environment::{mix64, Environment, EnvironmentError, SiteCoord};
use crate::network::{coalescence_time, eta_count, hop, trace, NetworkError};
use crate::stats::{self, proportion_stderr};

#[derive(Debug, Error)]
pub enum McError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

fn bad(field: &'static str, reason: impl Into<String>) -> McError {
    McError::Config {
        field,
        reason: reason.into(),
    }
}

fn default_epsilon() -> f64 {
    0.4
}
fn default_n_scale() -> u64 {
    10_000
}
fn default_t() -> f64 {
    1.0
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub p: f64,
    pub master_seed: u64,
    pub replicates: u64,
    /// Integer horizons for the coalescence-time tail.
    #[serde(default)]
    pub horizons: Vec<u64>,
    /// Interval width in Brownian units; the lattice width is `floor(eps sigma sqrt N)`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_n_scale")]
    pub n_scale: u64,
    /// Brownian time for the crowding and marginal experiments.
    #[serde(default = "default_t")]
    pub t: f64,
    /// Brownian times for the scaled pair-meeting series.
    #[serde(default)]
    pub times: Vec<f64>,
    /// Parallelism only; never part of the config hash.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn new(p: f64, master_seed: u64, replicates: u64) -> Self {
        Self {
            p,
            master_seed,
            replicates,
            horizons: Vec::new(),
            epsilon: default_epsilon(),
            n_scale: default_n_scale(),
            t: default_t(),
            times: Vec::new(),
            workers: default_workers(),
        }
    }

    pub fn validate(&self) -> Result<(), McError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(bad("p", format!("must lie in (0, 1], got {}", self.p)));
        }
        if self.replicates == 0 {
            return Err(bad("replicates", "must be at least 1"));
        }
        if self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("horizons", "must be strictly increasing"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(bad("epsilon", "must be positive"));
        }
        if self.n_scale == 0 {
            return Err(bad("n_scale", "must be at least 1"));
        }
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(bad("t", "must be a nonnegative number"));
        }
        if self.times.iter().any(|&t| !(t >= 0.0 && t.is_finite())) || self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("times", "must be nonnegative and strictly increasing"));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding with `workers` cleared.
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.workers = 0;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn replicate_seed(&self, index: u64) -> u64 {
        replicate_seed(self.master_seed, index)
    }

    fn sigma(&self) -> f64 {
        // p = 1 freezes every path
        if self.p >= 1.0 {
            0.0
        } else {
            analytics::sigma2(self.p).map(f64::sqrt).unwrap_or(0.0)
        }
    }

    /// Lattice interval width `floor(eps sigma sqrt N)`.
    pub fn lattice_width(&self) -> i64 {
        (self.epsilon * self.sigma() * (self.n_scale as f64).sqrt()).floor() as i64
    }

    pub fn lattice_steps(&self, t: f64) -> u64 {
        (t * self.n_scale as f64).floor() as u64
    }
}

pub fn replicate_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ mix64(index ^ 0x6a09_e667_f3bc_c909))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: u64,
    pub censored: Option<u64>,
    pub seed: u64,
    pub config_hash: String,
}

impl Estimate {
    fn proportion(hits: u64, n: u64, cfg: &ExperimentConfig) -> Self {
        let value = if n == 0 { f64::NAN } else { hits as f64 / n as f64 };
        Self {
            value,
            stderr: proportion_stderr(value, n),
            n,
            censored: None,
            seed: cfg.master_seed,
            config_hash: cfg.config_hash(),
        }
    }
}

/// Runs `f` once per replicate on `cfg.workers` threads; output is in
/// replicate order. Replicates that overflow a hop search are counted and
/// dropped.
pub fn run_replicates<T, F>(cfg: &ExperimentConfig, f: F) -> Result<(Vec<T>, u64), McError>
where
    T: Send,
    F: Fn(&Environment) -> Result<T, NetworkError> + Sync,
{
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| McError::Pool(e.to_string()))?;
    let results: Vec<Result<T, NetworkError>> = pool.install(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|i| {
                let env = Environment::new(cfg.replicate_seed(i), cfg.p).expect("validated p");
                f(&env)
            })
            .collect()
    });
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = 0;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(_) => failures += 1,
        }
    }
    Ok((ok, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub t: u64,
    /// `P(tau > t)`, with `censored` the number of replicates still apart.
    pub survival: Estimate,
    pub coalesced: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauTail {
    pub separation: i64,
    pub rows: Vec<TailRow>,
    pub failures: u64,
}

pub fn estimate_tau_tail(cfg: &ExperimentConfig, separation: i64) -> Result<TauTail, McError> {
    if separation < 1 {
        return Err(bad("separation", "must be at least 1"));
    }
    let horizon = cfg.horizons.last().copied().unwrap_or(0);
    let (u, v) = (SiteCoord::new(0, 0), SiteCoord::new(separation, 0));
    let (taus, failures) = run_replicates(cfg, |env| coalescence_time(env, u, v, horizon))?;
    let n = taus.len() as u64;
    let rows = cfg
        .horizons
        .iter()
        .map(|&t| {
            let alive = taus.iter().filter(|tau| tau.survives(t)).count() as u64;
            let mut survival = Estimate::proportion(alive, n, cfg);
            survival.censored = Some(alive);
            TailRow {
                t,
                survival,
                coalesced: n - alive,
            }
        })
        .collect();
    Ok(TauTail {
        separation,
        rows,
        failures,
    })
}

impl TauTail {
    pub fn tail_points(&self) -> Vec<analytics::TailPoint> {
        self.rows
            .iter()
            .map(|r| analytics::TailPoint {
                t: r.t as f64,
                survival: r.survival.value,
                stderr: r.survival.stderr,
            })
            .collect()
    }
}

/// Crowding statistics for paths started from every integer of
/// `[0, width]` and observed `steps` levels later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaReport {
    pub epsilon: f64,
    pub t: f64,
    pub width: i64,
    pub steps: u64,
    pub eta_ge2: Estimate,
    pub eta_ge3: Estimate,
    /// The two boundary paths, traced on their own, have not met.
    pub boundary_survival: Estimate,
    /// Replicates where `eta >= 2` disagrees with boundary survival; zero
    /// because non-crossing paths keep the boundary paths outermost.
    pub boundary_mismatches: u64,
    /// Survival of the two half-interval boundary pairs, their product and
    /// the joint frequency.
    pub left_half_survival: Estimate,
    pub right_half_survival: Estimate,
    pub half_product: f64,
    pub both_halves_survival: Estimate,
    /// Limit value `2 Phi(eps / sqrt(2 t)) - 1` of `P(eta >= 2)`.
    pub reference_ge2: f64,
    pub failures: u64,
}

#[derive(Debug, Clone, Copy)]
struct EtaSample {
    eta: usize,
    boundary: bool,
    left: bool,
    right: bool,
}

pub fn eta_report(cfg: &ExperimentConfig) -> Result<EtaReport, McError> {
    cfg.validate()?;
    let width = cfg.lattice_width();
    let steps = cfg.lattice_steps(cfg.t);
    let mid = width / 2;
    let apart = |env: &Environment, a: i64, b: i64| -> Result<bool, NetworkError> {
        if a == b {
            return Ok(false);
        }
        Ok(coalescence_time(env, SiteCoord::new(a, 0), SiteCoord::new(b, 0), steps)?.survives(steps))
    };
    let (samples, failures) = run_replicates(cfg, |env| {
        Ok(EtaSample {
            eta: eta_count(env, 0, width, 0, steps.max(1))?,
            boundary: apart(env, 0, width)?,
            left: apart(env, 0, mid)?,
            right: apart(env, mid, width)?,
        })
    })?;
    // zero steps: nothing has moved yet
    let samples: Vec<EtaSample> = if steps == 0 {
        samples
            .into_iter()
            .map(|s| EtaSample {
                eta: width as usize + 1,
                ..s
            })
            .collect()
    } else {
        samples
    };
    let n = samples.len() as u64;
    let count = |f: &dyn Fn(&EtaSample) -> bool| samples.iter().filter(|s| f(s)).count() as u64;
    let left = Estimate::proportion(count(&|s| s.left), n, cfg);
    let right = Estimate::proportion(count(&|s| s.right), n, cfg);
    Ok(EtaReport {
        epsilon: cfg.epsilon,
        t: cfg.t,
        width,
        steps,
        eta_ge2: Estimate::proportion(count(&|s| s.eta >= 2), n, cfg),
        eta_ge3: Estimate::proportion(count(&|s| s.eta >= 3), n, cfg),
        boundary_survival: Estimate::proportion(count(&|s| s.boundary), n, cfg),
        boundary_mismatches: if steps == 0 { 0 } else { count(&|s| (s.eta >= 2) != s.boundary) },
        half_product: left.value * right.value,
        left_half_survival: left,
        right_half_survival: right,
        both_halves_survival: Estimate::proportion(count(&|s| s.left && s.right), n, cfg),
        reference_ge2: if cfg.t > 0.0 {
            bw_meet_survival(&BmPairSpec::unit(cfg.epsilon, cfg.t)).unwrap_or(f64::NAN)
        } else {
            1.0
        },
        failures,
    })
}

/// `P(eta(0, tN; 0, eps sqrt N) >= threshold)` for threshold 2 or 3.
pub fn estimate_eta_ge(cfg: &ExperimentConfig, threshold: u32) -> Result<Estimate, McError> {
    let r = eta_report(cfg)?;
    match threshold {
        2 => Ok(r.eta_ge2),
        3 => Ok(r.eta_ge3),
        _ => Err(bad("threshold", "must be 2 or 3")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    pub t: f64,
    pub steps: u64,
    /// `X(floor(n t)) / (sigma sqrt n)` in replicate order.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub ks_distance: f64,
    /// 1% critical value times the slack factor 1.5.
    pub ks_threshold: f64,
    pub pass: bool,
    pub seed: u64,
    pub config_hash: String,
    pub failures: u64,
}

pub const KS_SLACK: f64 = 1.5;

pub fn estimate_marginal(cfg: &ExperimentConfig) -> Result<MarginalReport, McError> {
    cfg.validate()?;
    let steps = cfg.lattice_steps(cfg.t);
    let scale = cfg.sigma() * (cfg.n_scale as f64).sqrt();
    let (ends, failures) = run_replicates(cfg, |env| {
        Ok(trace(env, SiteCoord::new(0, 0), steps as usize)?.end().x)
    })?;
    let samples: Vec<f64> = ends
        .iter()
        .map(|&x| if x == 0 { 0.0 } else { x as f64 / scale })
        .collect();
    let (mean, variance) = stats::mean_variance(&samples);
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let ks_threshold = KS_SLACK * stats::ks_critical_1pct(samples.len());
    let ks_distance = if cfg.t > 0.0 {
        let sd = cfg.t.sqrt();
        stats::ks_distance(&sorted, |x| stats::normal_cdf(x / sd))
    } else if samples.iter().all(|&x| x == 0.0) {
        0.0
    } else {
        1.0
    };
    Ok(MarginalReport {
        t: cfg.t,
        steps,
        pass: ks_distance < ks_threshold,
        samples,
        mean,
        variance,
        ks_distance,
        ks_threshold,
        seed: cfg.master_seed,
        config_hash: cfg.config_hash(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeetingRow {
    pub t: f64,
    pub steps: u64,
    pub survival: Estimate,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeeting {
    pub width: i64,
    pub rows: Vec<MeetingRow>,
    pub failures: u64,
}

/// Survival of two walks started `floor(eps sigma sqrt N)` apart, at each
/// Brownian time of `cfg.times`.
pub fn estimate_pair_meeting_scaled(cfg: &ExperimentConfig) -> Result<PairMeeting, McError> {
    cfg.validate()?;
    let width = cfg.lattice_width();
    let max_t = cfg.times.last().copied().unwrap_or(0.0);
    let horizon = cfg.lattice_steps(max_t);
    let (u, v) = (SiteCoord::new(0, 0), SiteCoord::new(width, 0));
    let (taus, failures) = run_replicates(cfg, |env| coalescence_time(env, u, v, horizon))?;
    let n = taus.len() as u64;
    let rows = cfg
        .times
        .iter()
        .map(|&t| {
            let steps = cfg.lattice_steps(t);
            let alive = taus.iter().filter(|tau| tau.survives(steps)).count() as u64;
            let mut survival = Estimate::proportion(alive, n, cfg);
            survival.censored = Some(alive);
            let reference = if t > 0.0 {
                bw_meet_survival(&BmPairSpec::unit(cfg.epsilon, t)).unwrap_or(f64::NAN)
            } else {
                1.0
            };
            MeetingRow {
                t,
                steps,
                survival,
                reference,
            }
        })
        .collect();
    Ok(PairMeeting { width, rows, failures })
}

/// Empirical law of one hop from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementSample {
    pub counts: BTreeMap<i64, u64>,
    pub n: u64,
    pub mean: f64,
    /// Unbiased sample variance, from exact integer moments.
    pub variance: f64,
    pub failures: u64,
}

impl IncrementSample {
    pub fn frequency(&self, k: i64) -> Proportion {
        let hits = self.counts.get(&k).copied().unwrap_or(0);
        let v = hits as f64 / self.n as f64;
        Proportion {
            value: v,
            stderr: proportion_stderr(v, self.n),
        }
    }

    /// Standard error of the sample variance, from the fourth central moment.
    pub fn variance_stderr(&self) -> f64 {
        let n = self.n as f64;
        let m4 = self
            .counts
            .iter()
            .map(|(&k, &c)| c as f64 * (k as f64 - self.mean).powi(4))
            .sum::<f64>()
            / n;
        ((m4 - self.variance * self.variance) / n).max(0.0).sqrt()
    }
}

/// A bare proportion with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub value: f64,
    pub stderr: f64,
}

pub fn estimate_increments(cfg: &ExperimentConfig) -> Result<IncrementSample, McError> {
    let origin = SiteCoord::new(0, 0);
    let (ks, failures) = run_replicates(cfg, |env| Ok(hop(env, origin)?.x))?;
    let mut counts = BTreeMap::new();
    let (mut s1, mut s2) = (0i128, 0i128);
    for &k in &ks {
        *counts.entry(k).or_insert(0u64) += 1;
        s1 += k as i128;
        s2 += (k as i128) * (k as i128);
    }
    let n = ks.len() as u64;
    let nf = n as f64;
    let mean = s1 as f64 / nf;
    // (n s2 - s1^2) / (n (n - 1)) evaluated exactly in integers first
    let variance = ((n as i128) * s2 - s1 * s1) as f64 / (nf * (nf - 1.0));
    Ok(IncrementSample {
        counts,
        n,
        mean,
        variance,
        failures,
    })
}

/// Frequency of `Z_1 = m` given `Z_0 = m`.
pub fn estimate_persist(cfg: &ExperimentConfig, separation: i64) -> Result<Estimate, McError> {
    if separation < 1 {
        return Err(bad("separation", "must be at least 1"));
    }
    let (u, v) = (SiteCoord::new(0, 0), SiteCoord::new(separation, 0));
    let (same, _) = run_replicates(cfg, |env| Ok(hop(env, v)?.x - hop(env, u)?.x == separation))?;
    let hits = same.iter().filter(|&&b| b).count() as u64;
    Ok(Estimate::proportion(hits, same.len() as u64, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p: f64, reps: u64) -> ExperimentConfig {
        ExperimentConfig::new(p, 7, reps)
    }

    #[test]
    fn validation() {
        assert!(cfg(0.5, 10).validate().is_ok());
        assert!(cfg(0.0, 10).validate().is_err());
        assert!(cfg(0.5, 0).validate().is_err());
        let mut c = cfg(0.5, 10);
        c.horizons = vec![10, 10];
        assert!(matches!(c.validate(), Err(McError::Config { field: "horizons", .. })));
        c.horizons = vec![];
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_workers() {
        let a = cfg(0.5, 10);
        let mut b = a.clone();
        b.workers = 16;
        assert_eq!(a.config_hash(), b.config_hash());
        b.master_seed = 8;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn replicate_seeds_are_scrambled() {
        let s: Vec<u64> = (0..4).map(|i| replicate_seed(0, i)).collect();
        assert!(s.windows(2).all(|w| w[0] != w[1] && w[0].abs_diff(w[1]) > 1 << 20));
    }

    #[test]
    fn tail_at_zero_and_frozen_paths() {
        let mut c = cfg(0.5, 500);
        c.horizons = vec![0, 10, 100];
        let tail = estimate_tau_tail(&c, 1).unwrap();
        assert_eq!(tail.rows[0].survival.value, 1.0);
        for r in &tail.rows {
            assert_eq!(r.survival.censored.unwrap() + r.coalesced, 500);
        }
        assert!(tail.rows.windows(2).all(|w| w[0].survival.value >= w[1].survival.value));
        let mut frozen = c.clone();
        frozen.p = 1.0;
        let tail = estimate_tau_tail(&frozen, 3).unwrap();
        assert!(tail.rows.iter().all(|r| r.survival.value == 1.0));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut c = cfg(0.5, 300);
        c.horizons = vec![1, 10, 100];
        let one = estimate_tau_tail(&c, 2).unwrap();
        c.workers = 4;
        assert_eq!(one, estimate_tau_tail(&c, 2).unwrap());
    }

    #[test]
    fn eta_small_interval_and_boundary_identity() {
        let mut c = cfg(0.5, 200);
        c.n_scale = 100;
        c.epsilon = 0.05; // width floor(0.05 * 1.054 * 10) = 0
        let r = eta_report(&c).unwrap();
        assert_eq!(r.width, 0);
        assert_eq!(r.eta_ge2.value, 0.0);
        c.epsilon = 1.0;
        let r = eta_report(&c).unwrap();
        assert_eq!(r.width, 10);
        assert_eq!(r.boundary_mismatches, 0);
        assert_eq!(r.eta_ge2.value, r.boundary_survival.value);
        assert!(r.eta_ge3.value <= r.eta_ge2.value);
    }

    #[test]
    fn marginal_at_time_zero() {
        let mut c = cfg(0.5, 50);
        c.t = 0.0;
        let r = estimate_marginal(&c).unwrap();
        assert!(r.samples.iter().all(|&x| x == 0.0));
        assert!(r.pass);
    }

    #[test]
    fn meeting_survival_is_monotone() {
        let mut c = cfg(0.5, 400);
        c.n_scale = 400;
        c.epsilon = 0.5;
        c.times = vec![0.0, 0.25, 0.5, 1.0];
        let m = estimate_pair_meeting_scaled(&c).unwrap();
        assert_eq!(m.rows[0].survival.value, 1.0);
        assert!(m.rows.windows(2).all(|w| w[0].survival.value >= w[1].survival.value));
    }

    #[test]
    fn increments_small_sample() {
        let s = estimate_increments(&cfg(0.5, 20_000)).unwrap();
        assert_eq!(s.n, 20_000);
        let f0 = s.frequency(0);
        assert!((f0.value - 0.5).abs() < 4.0 * f0.stderr);
        let sd = s.variance_stderr();
        assert!((s.variance - 10.0 / 9.0).abs() < 4.0 * sd);
    }
}
