//! Closed-form model quantities and the exact enumeration oracles that check
//! them (and the simulator) independently.

use std::collections::BTreeMap;

use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{search_cap_for, SiteCoord};
use crate::exact::{self, ExactError, ExactEvaluator, LazySource, Poly, ProductModel};
use crate::network::hop;
use crate::stats::{self, KahanSum};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("model parameter p must lie in (0, 1), got {0}")]
    Domain(f64),
    #[error("separation must lie in 1..={max}, got {got}")]
    Separation { got: i64, max: i64 },
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error("enumeration left its window on a branch that should be complete")]
    WindowLeak,
    #[error("tail of the enumeration is not geometric beyond radius {radius}")]
    TailStructure { radius: i64 },
    #[error("tail check needs at least 5 horizons spanning two decades")]
    InsufficientHorizons,
}

fn check_p(p: f64) -> Result<f64, AnalyticsError> {
    if p > 0.0 && p < 1.0 {
        Ok(1.0 - p)
    } else {
        Err(AnalyticsError::Domain(p))
    }
}

/// Law of one hop displacement: `p` at zero, `q^(2|k|-1) p (q + p/2)` else.
pub fn increment_pmf(p: f64, k: i64) -> Result<f64, AnalyticsError> {
    let q = check_p(p)?;
    if k == 0 {
        return Ok(p);
    }
    let n = 2 * k.unsigned_abs() - 1;
    Ok(q.powi(n as i32) * p * (q + p / 2.0))
}

/// Variance of one hop displacement, `q (1 + q^2) / (p^2 (1 + q)^2)`.
pub fn sigma2(p: f64) -> Result<f64, AnalyticsError> {
    let q = check_p(p)?;
    Ok(q * (1.0 + q * q) / (p * p * (1.0 + q) * (1.0 + q)))
}

/// Upper bound on the chance that two same-level paths keep their gap for
/// one step: `p^2 + (1 - q^2) q^2 / (2 (1 + q^2))`.
pub fn c1_bound(p: f64) -> Result<f64, AnalyticsError> {
    let q = check_p(p)?;
    let q2 = q * q;
    Ok(p * p + (1.0 - q2) / (2.0 * (1.0 + q2)) * q2)
}

/// Openness probability of the far end of a conditioning interval, `p / (2 - p)`.
pub fn p_prime(p: f64) -> Result<f64, AnalyticsError> {
    check_p(p)?;
    Ok(p / (2.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub p: f64,
    pub q: f64,
    pub sigma2: f64,
    pub c1_bound: f64,
    pub p_prime: f64,
}

impl ModelConstants {
    pub fn new(p: f64) -> Result<Self, AnalyticsError> {
        Ok(Self {
            p,
            q: check_p(p)?,
            sigma2: sigma2(p)?,
            c1_bound: c1_bound(p)?,
            p_prime: p_prime(p)?,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

/// Padding beyond the relevant span so that neglected mass is below `2^-80`.
pub fn truncation_radius(p: f64) -> Result<i64, AnalyticsError> {
    let q = check_p(p)?;
    Ok((40.0 / (1.0 / q).log2()).ceil() as i64)
}

/// The hop displacement law tabulated out to the search cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementLaw {
    pub p: f64,
    pub pmf: BTreeMap<i64, f64>,
}

impl IncrementLaw {
    pub fn new(p: f64) -> Result<Self, AnalyticsError> {
        check_p(p)?;
        let cap = search_cap_for(p) as i64;
        let pmf = (-cap..=cap)
            .map(|k| increment_pmf(p, k).map(|v| (k, v)))
            .collect::<Result<_, _>>()?;
        Ok(Self { p, pmf })
    }

    pub fn mass(&self) -> f64 {
        self.pmf.values().copied().collect::<KahanSum>().value()
    }

    pub fn mean(&self) -> f64 {
        self.pmf
            .iter()
            .map(|(&k, &v)| k as f64 * v)
            .collect::<KahanSum>()
            .value()
    }

    /// Second moment about zero, i.e. the variance since the mean is zero.
    pub fn second_moment(&self) -> f64 {
        self.pmf
            .iter()
            .map(|(&k, &v)| (k * k) as f64 * v)
            .collect::<KahanSum>()
            .value()
    }
}

/// Hop law obtained by enumerating every environment configuration of the
/// window `[-radius, radius]` on the next level.
#[derive(Debug, Clone)]
pub struct ExactIncrementLaw {
    pub p: BigRational,
    pub radius: i64,
    pub pmf: BTreeMap<i64, BigRational>,
    /// Probability that the search leaves the window.
    pub neglected: BigRational,
}

pub fn enumerate_increment_law(p: f64, radius: i64) -> Result<ExactIncrementLaw, AnalyticsError> {
    check_p(p)?;
    let mut ev = ExactEvaluator::from_f64(p)?;
    let model = ProductModel {
        x_min: -radius,
        x_max: radius,
        level_min: 0,
        level_max: 1,
    };
    let origin = SiteCoord::new(0, 0);
    let dist = exact::distribution(&model, 1 << 24, |o| {
        let src = LazySource::new(o, |v| v, radius as u64 + 1);
        hop(&src, origin).map(|z| z.x).ok()
    })?;
    let mut pmf = BTreeMap::new();
    let mut neglected = BigRational::zero();
    for (key, poly) in &dist {
        match key {
            Some(Some(k)) => {
                pmf.insert(*k, ev.eval(poly));
            }
            Some(None) => return Err(AnalyticsError::WindowLeak),
            None => neglected += ev.eval(poly),
        }
    }
    Ok(ExactIncrementLaw {
        p: ev.p().clone(),
        radius,
        pmf,
        neglected,
    })
}

/// Exact sums over the geometric tail of the enumeration (left hop beyond
/// the window).
#[derive(Debug, Clone)]
pub struct TailSums {
    pub mass: BigRational,
    /// Sum of `(d_right - d_left) * prob` over the tail.
    pub gap_change: BigRational,
    /// Mass of `d_right == d_left` in the tail.
    pub persist: BigRational,
}

/// Exact joint law of the two hops from `(0, 0)` and `(m, 0)` in a shared
/// environment.
#[derive(Debug, Clone)]
pub struct JointOneStep {
    pub p: BigRational,
    pub m: i64,
    pub radius: i64,
    /// `(d_left, d_right) -> probability`, for left hops within the window.
    pub table: BTreeMap<(i64, i64), BigRational>,
    /// Mass of configurations where the left search leaves the window.
    pub neglected: BigRational,
    pub tail: TailSums,
    pub leaves: u64,
}

impl JointOneStep {
    /// Window mass plus the summed tail; exactly one when everything is right.
    pub fn total_mass(&self) -> BigRational {
        self.table.values().fold(BigRational::zero(), |a, v| a + v) + &self.tail.mass
    }

    /// `E[Z_1 | Z_0 = m]` with the tail included.
    pub fn expected_gap(&self) -> BigRational {
        let mut acc = self.tail.gap_change.clone();
        for (&(dl, dr), v) in &self.table {
            acc += v * BigRational::from_integer((dr - dl).into());
        }
        acc + BigRational::from_integer(self.m.into())
    }

    /// `P(Z_1 = m | Z_0 = m)`.
    pub fn persist_probability(&self) -> BigRational {
        let mut acc = self.tail.persist.clone();
        for (&(dl, dr), v) in &self.table {
            if dl == dr {
                acc += v;
            }
        }
        acc
    }

    pub fn left_marginal(&self) -> BTreeMap<i64, BigRational> {
        let mut out: BTreeMap<i64, BigRational> = BTreeMap::new();
        for (&(dl, _), v) in &self.table {
            *out.entry(dl).or_insert_with(BigRational::zero) += v;
        }
        out
    }

    pub fn right_marginal(&self) -> BTreeMap<i64, BigRational> {
        let mut out: BTreeMap<i64, BigRational> = BTreeMap::new();
        for (&(_, dr), v) in &self.table {
            *out.entry(dr).or_insert_with(BigRational::zero) += v;
        }
        out
    }

    /// Floating point view of the table, summed with compensation.
    pub fn table_f64(&self) -> BTreeMap<(i64, i64), f64> {
        self.table.iter().map(|(&k, v)| (k, exact::to_f64(v))).collect()
    }

    pub fn window_mass_f64(&self) -> f64 {
        self.table.values().map(exact::to_f64).collect::<KahanSum>().value()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JointOptions {
    pub max_separation: i64,
    /// Left-hop window radius; `None` uses the truncation rule (at least `m + 4`).
    pub radius: Option<i64>,
    pub budget: u64,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            max_separation: 12,
            radius: None,
            budget: 1 << 24,
        }
    }
}

pub fn joint_one_step_pmf(p: f64, m: i64, opts: JointOptions) -> Result<JointOneStep, AnalyticsError> {
    check_p(p)?;
    if m < 1 || m > opts.max_separation {
        return Err(AnalyticsError::Separation {
            got: m,
            max: opts.max_separation,
        });
    }
    let radius = opts.radius.unwrap_or(truncation_radius(p)?).max(m + 4);
    // A left hop of length a pins the right search within distance m + a,
    // so this window is complete for every left hop up to `radius`.
    let model = ProductModel {
        x_min: -radius,
        x_max: 2 * m + radius,
        level_min: 0,
        level_max: 1,
    };
    let cap = (2 * m + radius + 1) as u64;
    let (u, v) = (SiteCoord::new(0, 0), SiteCoord::new(m, 0));
    let mut polys: BTreeMap<(i64, i64), Poly> = BTreeMap::new();
    let mut outside = Poly::zero();
    let mut leak = false;
    let leaves = exact::for_each_leaf(
        &model,
        opts.budget,
        |o| {
            let src = LazySource::new(o, |v| v, cap);
            let a = hop(&src, u).ok()?;
            let b = hop(&src, v).ok()?;
            Some((a.x, b.x - m))
        },
        |w, out, val| match (out, val) {
            (true, _) => outside.add_monomial(w, 1),
            (false, Some(key)) => polys.entry(key).or_default().add_monomial(w, 1),
            (false, None) => leak = true,
        },
    )?;
    if leak {
        return Err(AnalyticsError::WindowLeak);
    }

    let mut ev = ExactEvaluator::from_f64(p)?;
    let table: BTreeMap<(i64, i64), BigRational> =
        polys.iter().map(|(&k, poly)| (k, ev.eval(poly))).collect();
    let neglected = ev.eval(&outside);
    let tail = geometric_tail(&table, radius, &mut ev)?;
    if tail.mass != neglected {
        return Err(AnalyticsError::TailStructure { radius });
    }
    Ok(JointOneStep {
        p: ev.p().clone(),
        m,
        radius,
        table,
        neglected,
        tail,
        leaves,
    })
}

/// Beyond the separation, the subtree below a left hop of length `a` is the
/// same for every `a` up to a shift: weights scale by `q^2` per unit of `a`
/// and displacements are affine in `a`. The per-radius sums are therefore
/// `r^a (alpha + beta a)` with `r = q^2`; the coefficients are fitted
/// exactly on the last two radii, confirmed on a third, and summed in
/// closed form.
fn geometric_tail(
    table: &BTreeMap<(i64, i64), BigRational>,
    radius: i64,
    ev: &mut ExactEvaluator,
) -> Result<TailSums, AnalyticsError> {
    let q = ev.q();
    let r = &q * &q;
    let per_radius = |a: i64| {
        let mut g = BigRational::zero();
        let mut f = BigRational::zero();
        let mut h = BigRational::zero();
        for (&(dl, dr), v) in table {
            if dl.abs() == a {
                g += v;
                f += v * BigRational::from_integer((dr - dl).into());
                if dl == dr {
                    h += v;
                }
            }
        }
        [g, f, h]
    };
    let rpow = |a: i64| num_traits::pow(r.clone(), a as usize);
    let scaled: Vec<[BigRational; 3]> = (radius - 2..=radius)
        .map(|a| {
            let s = rpow(a);
            per_radius(a).map(|x| x / &s)
        })
        .collect();

    let one = BigRational::one();
    let n = BigRational::from_integer((radius + 1).into());
    let s0 = rpow(radius + 1) / (&one - &r);
    let s1 = rpow(radius + 1) * (&n * (&one - &r) + &r) / ((&one - &r) * (&one - &r));

    let mut sums = Vec::with_capacity(3);
    for i in 0..3 {
        let (f0, f1, f2) = (&scaled[0][i], &scaled[1][i], &scaled[2][i]);
        let beta = f2 - f1;
        if (f1 - f0) != beta {
            return Err(AnalyticsError::TailStructure { radius });
        }
        let alpha = f2 - &beta * BigRational::from_integer(radius.into());
        sums.push(&alpha * &s0 + &beta * &s1);
    }
    let mut it = sums.into_iter();
    Ok(TailSums {
        mass: it.next().unwrap(),
        gap_change: it.next().unwrap(),
        persist: it.next().unwrap(),
    })
}

/// One point of a survival curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub t: f64,
    pub survival: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub sqrt_t_survival: Vec<f64>,
    pub running_max: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// No later `sqrt(t) P(tau > t)` exceeds an earlier one by more than
    /// three combined standard errors.
    pub bounded: bool,
    pub slope_in_window: bool,
    /// Decays faster than the `t^-1/2` bound requires.
    pub steeper_than_bound: bool,
    /// Zero or constant survival: the log-log fit is meaningless.
    pub degenerate: bool,
    pub pass: bool,
    pub notes: Vec<String>,
}

pub const SLOPE_WINDOW: (f64, f64) = (-0.65, -0.35);

pub fn tail_exponent_check(series: &[TailPoint]) -> Result<TailReport, AnalyticsError> {
    if series.len() < 5 {
        return Err(AnalyticsError::InsufficientHorizons);
    }
    let t_min = series.iter().map(|s| s.t).fold(f64::INFINITY, f64::min);
    let t_max = series.iter().map(|s| s.t).fold(0.0, f64::max);
    if !(t_min > 0.0) || t_max / t_min < 100.0 * (1.0 - 1e-9) {
        return Err(AnalyticsError::InsufficientHorizons);
    }

    let scaled: Vec<f64> = series.iter().map(|s| s.t.sqrt() * s.survival).collect();
    let scaled_se: Vec<f64> = series.iter().map(|s| s.t.sqrt() * s.stderr).collect();
    let running_max = scaled
        .iter()
        .scan(f64::NEG_INFINITY, |m, &v| {
            *m = m.max(v);
            Some(*m)
        })
        .collect();

    let mut notes = Vec::new();
    let mut bounded = true;
    for i in 0..scaled.len() {
        for j in i + 1..scaled.len() {
            let tol = 3.0 * (scaled_se[i].powi(2) + scaled_se[j].powi(2)).sqrt();
            if scaled[j] - scaled[i] > tol {
                bounded = false;
                notes.push(format!(
                    "upward trend: sqrt(t) P at t={} exceeds t={} by more than 3 sigma",
                    series[j].t, series[i].t
                ));
            }
        }
    }

    let positive = series.iter().all(|s| s.survival > 0.0);
    let constant = series.iter().all(|s| s.survival == series[0].survival);
    let degenerate = !positive || constant;
    let (intercept, slope) = if positive {
        let xs: Vec<f64> = series.iter().map(|s| s.t.ln()).collect();
        let ys: Vec<f64> = series.iter().map(|s| s.survival.ln()).collect();
        stats::linear_fit(&xs, &ys)
    } else {
        (f64::NAN, f64::NAN)
    };
    if degenerate {
        notes.push("degenerate survival curve (zero or constant)".to_string());
    }
    let slope_in_window = !degenerate && slope >= SLOPE_WINDOW.0 && slope <= SLOPE_WINDOW.1;
    let steeper_than_bound = !degenerate && slope < SLOPE_WINDOW.0;
    if steeper_than_bound {
        notes.push(format!(
            "slope {slope:.4} is steeper than t^-1/2; the upper bound holds but the window check fails"
        ));
    }
    Ok(TailReport {
        sqrt_t_survival: scaled,
        running_max,
        slope,
        intercept,
        bounded,
        slope_in_window,
        steeper_than_bound,
        degenerate,
        pass: bounded && slope_in_window,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn pmf_reference_values() {
        assert_eq!(increment_pmf(0.5, 0).unwrap(), 0.5);
        assert!((increment_pmf(0.5, 1).unwrap() - 0.1875).abs() < 1e-16);
        assert!((increment_pmf(0.5, -1).unwrap() - 0.1875).abs() < 1e-16);
        assert!(increment_pmf(0.0, 1).is_err());
        assert!(increment_pmf(1.0, 1).is_err());
    }

    /// Brute force over the 2^3 configurations of {-1, 0, 1} and the tie bit.
    #[test]
    fn pmf_one_by_hand_enumeration() {
        let p = 0.5;
        let mut acc = 0.0;
        for bits in 0..8u32 {
            let open = |i: u32| bits >> i & 1 == 1;
            let (l, c, r) = (open(0), open(1), open(2));
            let w: f64 = [l, c, r].iter().map(|&o| if o { p } else { 1.0 - p }).product();
            if c {
                continue;
            }
            acc += match (l, r) {
                (true, false) => w,
                (true, true) => w / 2.0,
                _ => 0.0,
            };
        }
        assert!((acc - increment_pmf(p, -1).unwrap()).abs() < 1e-16);
    }

    #[test]
    fn law_symmetry_normalization_moments() {
        for i in 1..10 {
            let p = i as f64 / 10.0;
            let law = IncrementLaw::new(p).unwrap();
            for k in 1..30 {
                assert_eq!(law.pmf[&k], law.pmf[&-k]);
            }
            assert!((law.mass() - 1.0).abs() < 1e-12, "{p}");
            assert!(law.mean().abs() < 1e-12);
            assert!((law.second_moment() - sigma2(p).unwrap()).abs() < 1e-10, "{p}");
        }
    }

    #[test]
    fn sigma2_reference() {
        assert!((sigma2(0.5).unwrap() - 10.0 / 9.0).abs() < 1e-15);
        assert!(sigma2(1.0 - 1e-9).unwrap() < 1e-8);
    }

    #[test]
    fn c1_reference() {
        assert!((c1_bound(0.5).unwrap() - 0.325).abs() < 1e-15);
        assert!(c1_bound(1.0 - 1e-9).unwrap() > 1.0 - 1e-8);
        for i in 1..100 {
            let c = c1_bound(i as f64 / 100.0).unwrap();
            assert!(c > 0.0 && c < 1.0);
        }
    }

    #[test]
    fn p_prime_reference() {
        assert!((p_prime(0.5).unwrap() - 1.0 / 3.0).abs() < 1e-16);
        let k = ModelConstants::new(0.5).unwrap();
        assert!(k.p_prime > 0.0 && k.p_prime < 1.0);
    }

    #[test]
    fn exact_increment_law_matches_closed_form() {
        let law = enumerate_increment_law(0.5, 12).unwrap();
        assert_eq!(law.pmf[&0], rat(1, 2));
        assert_eq!(law.pmf[&1], rat(3, 16));
        assert_eq!(law.pmf[&-1], rat(3, 16));
        // q^(2*12+1) of the mass is in all-closed windows
        let total = law.pmf.values().fold(BigRational::zero(), |a, v| a + v) + &law.neglected;
        assert_eq!(total, BigRational::one());
        assert_eq!(law.neglected, num_traits::pow(rat(1, 2), 25));
    }

    #[test]
    fn joint_small_case_by_hand() {
        // m = 1: the gap persists only when both sites above are open
        let j = joint_one_step_pmf(0.5, 1, JointOptions::default()).unwrap();
        assert_eq!(j.persist_probability(), rat(1, 4));
        assert_eq!(j.total_mass(), BigRational::one());
        assert_eq!(j.expected_gap(), BigRational::one());
    }

    #[test]
    fn joint_marginals_match_increment_law() {
        let j = joint_one_step_pmf(0.7, 3, JointOptions::default()).unwrap();
        let mut ev = ExactEvaluator::from_f64(0.7).unwrap();
        let _ = &mut ev;
        for (k, v) in j.left_marginal() {
            if k.abs() <= 10 {
                assert!((exact::to_f64(&v) - increment_pmf(0.7, k).unwrap()).abs() < 1e-12);
            }
        }
        assert!(exact::to_f64(&j.neglected) < 1e-12);
    }

    #[test]
    fn joint_rejects_bad_input() {
        assert!(joint_one_step_pmf(0.5, 0, JointOptions::default()).is_err());
        assert!(joint_one_step_pmf(0.5, 13, JointOptions::default()).is_err());
        assert!(joint_one_step_pmf(1.0, 2, JointOptions::default()).is_err());
    }

    fn synthetic(f: impl Fn(f64) -> f64) -> Vec<TailPoint> {
        [100.0, 316.0, 1000.0, 3162.0, 10000.0]
            .iter()
            .map(|&t| TailPoint {
                t,
                survival: f(t),
                stderr: 1e-4,
            })
            .collect()
    }

    #[test]
    fn tail_check_inverse_sqrt() {
        let r = tail_exponent_check(&synthetic(|t| 0.8 / t.sqrt())).unwrap();
        assert!((r.slope + 0.5).abs() < 1e-12);
        assert!(r.sqrt_t_survival.iter().all(|v| (v - 0.8).abs() < 1e-12));
        assert!(r.bounded && r.slope_in_window && r.pass);
    }

    #[test]
    fn tail_check_inverse_linear() {
        let r = tail_exponent_check(&synthetic(|t| 5.0 / t)).unwrap();
        assert!((r.slope + 1.0).abs() < 1e-12);
        assert!(r.bounded);
        assert!(r.steeper_than_bound);
        assert!(!r.slope_in_window && !r.pass);
        assert!(!r.notes.is_empty());
    }

    #[test]
    fn tail_check_flags_growth_and_degeneracy() {
        let r = tail_exponent_check(&synthetic(|t| 0.01 * t.powf(-0.3))).unwrap();
        assert!(!r.bounded);
        let flat = tail_exponent_check(&synthetic(|_| 1.0)).unwrap();
        assert!(flat.degenerate && !flat.pass);
        let zero = tail_exponent_check(&synthetic(|t| if t > 500.0 { 0.0 } else { 0.1 })).unwrap();
        assert!(zero.degenerate && !zero.pass);
        assert!(tail_exponent_check(&synthetic(|t| 1.0 / t)[..4]).is_err());
    }
}
