//! Lazily evaluated Bernoulli fields over the integer lattice.
//!
//! A site's `(omega, upsilon)` pair is produced by a keyed Philox2x64-10
//! block on the counter `(x, level)`, so any window of the field can be
//! queried in any order, from any thread, without storing anything.

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

/// A point of the lattice: abscissa `x` at time `level`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteCoord {
    pub x: i64,
    pub level: i64,
}

impl SiteCoord {
    pub const fn new(x: i64, level: i64) -> Self {
        Self { x, level }
    }
}

/// The pair of bits attached to a site.
///
/// `omega` marks the site as open (a possible hop target); `upsilon` breaks
/// two-sided ties for hops *leaving* the site: `false` means left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteState {
    pub omega: bool,
    pub upsilon: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvironmentError {
    #[error("open-site probability must lie in (0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("empirical check needs at least {min} sites, got {got}")]
    TooFewSites { min: u64, got: u64 },
    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidSignificance(f64),
}

/// Read access to a realization of the two fields.
///
/// Implemented by [`Environment`] for simulation and by the lazy
/// enumeration oracles for exact computations, so the hop map is written once.
pub trait SiteSource {
    fn omega(&self, z: SiteCoord) -> bool;
    fn upsilon(&self, z: SiteCoord) -> bool;

    /// Largest search distance a hop may use before giving up.
    fn search_cap(&self) -> u64;

    fn site_state(&self, z: SiteCoord) -> SiteState {
        SiteState {
            omega: self.omega(z),
            upsilon: self.upsilon(z),
        }
    }
}

impl<S: SiteSource + ?Sized> SiteSource for &S {
    fn omega(&self, z: SiteCoord) -> bool {
        (**self).omega(z)
    }
    fn upsilon(&self, z: SiteCoord) -> bool {
        (**self).upsilon(z)
    }
    fn search_cap(&self) -> u64 {
        (**self).search_cap()
    }
}

const PHILOX_M: u64 = 0xD2B7_4407_B1CE_6E93;
const PHILOX_W: u64 = 0x9E37_79B9_7F4A_7C15;
const TWO_POW_53: f64 = 9_007_199_254_740_992.0;

/// Philox2x64 with 10 rounds.
#[inline]
pub fn philox2x64_10(ctr: [u64; 2], key: u64) -> [u64; 2] {
    let mut c = ctr;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k = k.wrapping_add(PHILOX_W);
        }
        let prod = u128::from(PHILOX_M) * u128::from(c[0]);
        let hi = (prod >> 64) as u64;
        let lo = prod as u64;
        c = [hi ^ k ^ c[1], lo];
    }
    c
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hard cap on the hop search distance for open-site probability `p`.
///
/// With `q = 1 - p`, no open site within the cap happens with probability
/// below `2^-128`.
pub fn search_cap_for(p: f64) -> u64 {
    let q = 1.0 - p;
    if q <= 0.0 {
        return 64;
    }
    let bits = (1.0 / q).log2();
    (64.0 / bits).ceil() as u64 + 64
}

/// One realization of `(Omega, Upsilon)` with `Omega ~ Bernoulli(p)` and
/// `Upsilon ~ Bernoulli(1/2)`, all independent.
#[derive(Debug, Clone)]
pub struct Environment {
    seed: u64,
    p: f64,
    threshold: u64,
    cap: u64,
}

impl Environment {
    /// `p = 1` is accepted (every site open); `p = 0` is not, since no hop
    /// could ever terminate.
    pub fn new(seed: u64, p: f64) -> Result<Self, EnvironmentError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(EnvironmentError::InvalidProbability(p));
        }
        Ok(Self {
            seed,
            p,
            threshold: (p * TWO_POW_53) as u64,
            cap: search_cap_for(p),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    #[inline]
    fn block(&self, z: SiteCoord) -> [u64; 2] {
        philox2x64_10([z.x as u64, z.level as u64], self.seed)
    }
}

impl SiteSource for Environment {
    #[inline]
    fn omega(&self, z: SiteCoord) -> bool {
        (self.block(z)[0] >> 11) < self.threshold
    }

    #[inline]
    fn upsilon(&self, z: SiteCoord) -> bool {
        self.block(z)[1] >> 63 == 1
    }

    fn search_cap(&self) -> u64 {
        self.cap
    }

    #[inline]
    fn site_state(&self, z: SiteCoord) -> SiteState {
        let b = self.block(z);
        SiteState {
            omega: (b[0] >> 11) < self.threshold,
            upsilon: b[1] >> 63 == 1,
        }
    }
}

/// Wraps a source and counts queried and open sites. Diagnostics only.
#[derive(Debug)]
pub struct CountingSource<S> {
    inner: S,
    queried: Cell<u64>,
    open: Cell<u64>,
}

impl<S: SiteSource> CountingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            queried: Cell::new(0),
            open: Cell::new(0),
        }
    }

    pub fn queried(&self) -> u64 {
        self.queried.get()
    }

    pub fn open(&self) -> u64 {
        self.open.get()
    }

    pub fn open_fraction(&self) -> f64 {
        if self.queried.get() == 0 {
            return f64::NAN;
        }
        self.open.get() as f64 / self.queried.get() as f64
    }
}

impl<S: SiteSource> SiteSource for CountingSource<S> {
    fn omega(&self, z: SiteCoord) -> bool {
        let w = self.inner.omega(z);
        self.queried.set(self.queried.get() + 1);
        if w {
            self.open.set(self.open.get() + 1);
        }
        w
    }

    fn upsilon(&self, z: SiteCoord) -> bool {
        self.inner.upsilon(z)
    }

    fn search_cap(&self) -> u64 {
        self.inner.search_cap()
    }
}

/// One frequency line of a [`BernoulliReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyCheck {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    pub z_score: f64,
    /// One-degree-of-freedom chi-square statistic (`z^2`).
    pub chi_square: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BernoulliReport {
    pub n_sites: u64,
    pub significance: f64,
    pub critical_z: f64,
    pub checks: Vec<FrequencyCheck>,
    /// Sample correlation of `omega` at horizontally adjacent sites.
    pub adjacent_correlation: f64,
    pub correlation_bound: f64,
    pub pass: bool,
}

/// Frequency statistics for `omega`, `upsilon`, their product and adjacent
/// sites over `n_sites` sites laid out row by row in a 1000-wide window.
pub fn empirical_bernoulli_check(
    env: &Environment,
    n_sites: u64,
    significance: f64,
) -> Result<BernoulliReport, EnvironmentError> {
    const MIN_SITES: u64 = 10_000;
    const ROW: u64 = 1000;
    if n_sites < MIN_SITES {
        return Err(EnvironmentError::TooFewSites {
            min: MIN_SITES,
            got: n_sites,
        });
    }
    if !(significance > 0.0 && significance < 1.0) {
        return Err(EnvironmentError::InvalidSignificance(significance));
    }
    let critical_z = stats::normal_quantile(1.0 - significance / 2.0);

    let (mut n_omega, mut n_upsilon, mut n_both) = (0u64, 0u64, 0u64);
    let (mut s_xy, mut s_x, mut s_y, mut pairs) = (0u64, 0u64, 0u64, 0u64);
    let mut prev: Option<bool> = None;
    for i in 0..n_sites {
        let z = SiteCoord::new((i % ROW) as i64, (i / ROW) as i64);
        let s = env.site_state(z);
        n_omega += u64::from(s.omega);
        n_upsilon += u64::from(s.upsilon);
        n_both += u64::from(s.omega && s.upsilon);
        if i % ROW == 0 {
            prev = None;
        }
        if let Some(left) = prev {
            pairs += 1;
            s_x += u64::from(left);
            s_y += u64::from(s.omega);
            s_xy += u64::from(left && s.omega);
        }
        prev = Some(s.omega);
    }

    let p = env.p();
    let n = n_sites as f64;
    let line = |name: &str, count: u64, expected: f64| {
        let observed = count as f64 / n;
        let sd = (expected * (1.0 - expected) / n).sqrt();
        let z_score = if sd > 0.0 {
            (observed - expected) / sd
        } else if observed == expected {
            0.0
        } else {
            f64::INFINITY
        };
        FrequencyCheck {
            name: name.to_string(),
            observed,
            expected,
            z_score,
            chi_square: z_score * z_score,
            pass: z_score.abs() <= critical_z,
        }
    };
    let checks = vec![
        line("omega", n_omega, p),
        line("upsilon", n_upsilon, 0.5),
        line("omega_and_upsilon", n_both, p / 2.0),
    ];

    let m = pairs as f64;
    let (mx, my) = (s_x as f64 / m, s_y as f64 / m);
    let cov = s_xy as f64 / m - mx * my;
    let denom = (mx * (1.0 - mx) * my * (1.0 - my)).sqrt();
    let adjacent_correlation = if denom > 0.0 { cov / denom } else { 0.0 };
    let correlation_bound = 4.0 / m.sqrt();

    let pass = checks.iter().all(|c| c.pass) && adjacent_correlation.abs() < correlation_bound;
    Ok(BernoulliReport {
        n_sites,
        significance,
        critical_z,
        checks,
        adjacent_correlation,
        correlation_bound,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn philox_known_answer() {
        assert_eq!(
            philox2x64_10([0, 0], 0),
            [0xca00_a045_9843_d731, 0x66c2_4222_c9a8_45b5]
        );
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(Environment::new(1, 0.0).is_err());
        assert!(Environment::new(1, -0.2).is_err());
        assert!(Environment::new(1, 1.5).is_err());
        assert!(Environment::new(1, f64::NAN).is_err());
        assert!(Environment::new(1, 1.0).is_ok());
    }

    #[test]
    fn p_one_opens_everything() {
        let env = Environment::new(99, 1.0).unwrap();
        for x in -50..50 {
            for level in -3..3 {
                assert!(env.omega(SiteCoord::new(x, level)));
            }
        }
    }

    #[test]
    fn queries_are_pure() {
        let env = Environment::new(0xDEAD_BEEF, 0.37).unwrap();
        let twin = Environment::new(0xDEAD_BEEF, 0.37).unwrap();
        for x in [-1_000_000_007i64, -3, 0, 5, i64::MAX, i64::MIN] {
            let z = SiteCoord::new(x, 17);
            assert_eq!(env.site_state(z), env.site_state(z));
            assert_eq!(env.site_state(z), twin.site_state(z));
            assert_eq!(env.site_state(z).omega, env.omega(z));
            assert_eq!(env.site_state(z).upsilon, env.upsilon(z));
        }
    }

    #[test]
    fn seeds_change_the_field() {
        let a = Environment::new(1, 0.5).unwrap();
        let b = Environment::new(2, 0.5).unwrap();
        let differ = (0..256)
            .filter(|&x| a.omega(SiteCoord::new(x, 0)) != b.omega(SiteCoord::new(x, 0)))
            .count();
        assert!(differ > 64, "{differ}");
    }

    #[test]
    fn search_cap_matches_formula() {
        assert_eq!(search_cap_for(0.5), 128);
        assert_eq!(search_cap_for(1.0), 64);
        // q = 0.7: ceil(64 / 0.5146) = 125
        assert_eq!(search_cap_for(0.3), 125 + 64);
    }

    #[test]
    fn near_one_open_fraction() {
        // p = 0.999 over 10^6 sites: 3 sigma = 3 * sqrt(0.999 * 0.001 / 1e6)
        let env = Environment::new(7, 0.999).unwrap();
        let counting = CountingSource::new(&env);
        for i in 0..1_000_000i64 {
            counting.omega(SiteCoord::new(i % 1000, i / 1000));
        }
        let sd = (0.999f64 * 0.001 / 1e6).sqrt();
        assert_eq!(counting.queried(), 1_000_000);
        assert!((counting.open_fraction() - 0.999).abs() < 3.0 * sd);
    }

    #[test]
    fn bernoulli_check_half() {
        let env = Environment::new(2024, 0.5).unwrap();
        let report = empirical_bernoulli_check(&env, 1_000_000, 1e-4).unwrap();
        assert!(report.pass, "{report:?}");
        // 3 sigma binomial interval at n = 10^6 is 0.0015 < 0.002
        assert!((report.checks[0].observed - 0.5).abs() < 0.002);
        assert!((report.checks[1].observed - 0.5).abs() < 0.002);
        let prod_sd = (0.25f64 * 0.75 / 1e6).sqrt();
        assert!((report.checks[2].observed - 0.25).abs() < 3.0 * prod_sd);
    }

    #[test]
    fn bernoulli_check_upsilon_ignores_p() {
        for p in [0.1, 0.9] {
            let env = Environment::new(5, p).unwrap();
            let report = empirical_bernoulli_check(&env, 1_000_000, 1e-4).unwrap();
            assert!((report.checks[1].observed - 0.5).abs() < 0.002, "{p}");
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn bernoulli_check_preconditions() {
        let env = Environment::new(5, 0.5).unwrap();
        assert!(matches!(
            empirical_bernoulli_check(&env, 100, 0.01),
            Err(EnvironmentError::TooFewSites { .. })
        ));
        assert!(empirical_bernoulli_check(&env, 20_000, 0.0).is_err());
    }
}
