//! The environment law given that one path follows a fixed trajectory.

use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use super::CouplingError;
use crate::environment::{SiteCoord, SiteSource};
use crate::exact::{self, ExactEvaluator, Factor, LazySource, Model, Monomial, Poly, ProductModel, SiteVar};
use crate::network::hop;

/// Searches next to a conditioning path always stop at the path, so the
/// cap only guards against logic errors.
pub(crate) const SEARCH_CAP: u64 = 1 << 16;

/// `p / (2 - p)`: the far end of a nonzero step is open.
pub const FAR_OPEN: Monomial = Monomial {
    p: 1,
    q: 0,
    inv_two_minus_p: 1,
    two: 0,
};
/// `q / (2 - p)`: far end closed, with one given tie bit.
pub const FAR_CLOSED_HALF: Monomial = Monomial {
    p: 0,
    q: 1,
    inv_two_minus_p: 1,
    two: 0,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditioningPath {
    positions: Vec<i64>,
}

impl ConditioningPath {
    /// `positions[s]` is the abscissa at level `s`; `positions[0]` is the start `j`.
    pub fn from_positions(positions: Vec<i64>) -> Result<Self, CouplingError> {
        if positions.is_empty() {
            return Err(CouplingError::EmptyPath);
        }
        Ok(Self { positions })
    }

    pub fn from_increments(j: i64, increments: &[i64]) -> Self {
        let mut positions = Vec::with_capacity(increments.len() + 1);
        positions.push(j);
        for d in increments {
            positions.push(positions.last().unwrap() + d);
        }
        Self { positions }
    }

    pub fn j(&self) -> i64 {
        self.positions[0]
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> &[i64] {
        &self.positions
    }

    pub fn at(&self, s: usize) -> i64 {
        self.positions[s]
    }

    /// `pi(s) - pi(s - 1)` for `s >= 1`.
    pub fn increment(&self, s: usize) -> i64 {
        self.positions[s] - self.positions[s - 1]
    }

    pub fn increments(&self) -> Vec<i64> {
        (1..=self.len()).map(|s| self.increment(s)).collect()
    }

    /// The end of `I_s` opposite to `pi(s)`: `2 pi(s-1) - pi(s)`.
    pub fn far_end(&self, s: usize) -> i64 {
        2 * self.positions[s - 1] - self.positions[s]
    }

    /// The path with every increment negated.
    pub fn reflected(&self) -> Self {
        let j = self.j();
        Self {
            positions: self.positions.iter().map(|&x| 2 * j - x).collect(),
        }
    }

    /// Equal to `self` before `t0` and one unit to the right from `t0` on.
    pub fn shifted_from(&self, t0: usize) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .enumerate()
                .map(|(s, &x)| if s >= t0 { x + 1 } else { x })
                .collect(),
        }
    }

    pub fn within(&self, lo: i64, hi: i64) -> bool {
        self.positions.iter().all(|x| (lo..=hi).contains(x))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementOrderWitness {
    pub holds: bool,
    /// First `(k, l)` with `pi1(l) - pi1(k) > pi2(l) - pi2(k)`.
    pub violation: Option<(usize, usize)>,
}

/// Decides `pi1 ≺ pi2`: every increment window of `pi1` is dominated by
/// the corresponding window of `pi2`.
pub fn check_increment_order(
    pi1: &ConditioningPath,
    pi2: &ConditioningPath,
) -> Result<IncrementOrderWitness, CouplingError> {
    if pi1.len() != pi2.len() {
        return Err(CouplingError::LengthMismatch(pi1.len(), pi2.len()));
    }
    for k in 0..=pi1.len() {
        for l in k..=pi1.len() {
            if pi1.at(l) - pi1.at(k) > pi2.at(l) - pi2.at(k) {
                return Ok(IncrementOrderWitness {
                    holds: false,
                    violation: Some((k, l)),
                });
            }
        }
    }
    Ok(IncrementOrderWitness {
        holds: true,
        violation: None,
    })
}

/// Law of the environment given `X_j = pi`. Level `s >= 1` of the path
/// forces `omega(pi(s), s) = 1`; a nonzero step also closes the interior of
/// `I_s` and couples its far end with the tie bit `upsilon(pi(s-1), s-1)`.
/// Everything else keeps the product law.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionalLaw {
    pub path: ConditioningPath,
}

impl ConditionalLaw {
    pub fn new(path: ConditioningPath) -> Self {
        Self { path }
    }

    /// The dependent pair of level `s`: `(omega(far end, s), upsilon(pi(s-1), s-1))`.
    ///
    /// When the far end is open both sites tie, and the path went to
    /// `pi(s)`, so the tie bit points along the step (1 = right).
    pub fn pair_factor(&self, s: usize) -> Option<Factor<SiteVar>> {
        let inc = self.path.increment(s);
        if inc == 0 {
            return None;
        }
        let dir = u32::from(inc > 0);
        Some(Factor {
            vars: vec![
                SiteVar::Omega(SiteCoord::new(self.path.far_end(s), s as i64)),
                SiteVar::Upsilon(SiteCoord::new(self.path.at(s - 1), s as i64 - 1)),
            ],
            outcomes: vec![
                (1 | dir << 1, FAR_OPEN),
                (0, FAR_CLOSED_HALF),
                (2, FAR_CLOSED_HALF),
            ],
        })
    }

    /// Variables whose law differs from the product law.
    pub fn constrained_vars(&self) -> Vec<SiteVar> {
        let mut out = Vec::new();
        for s in 1..=self.path.len() {
            let (a, b) = (self.path.at(s), self.path.far_end(s));
            for x in a.min(b)..=a.max(b) {
                out.push(SiteVar::Omega(SiteCoord::new(x, s as i64)));
            }
            if a != b {
                out.push(SiteVar::Upsilon(SiteCoord::new(self.path.at(s - 1), s as i64 - 1)));
            }
        }
        out
    }

    /// Total weight of all constrained configurations; one exactly.
    pub fn total_mass(&self, budget: u64) -> Result<Poly, CouplingError> {
        let vars = self.constrained_vars();
        let mut mass = Poly::zero();
        exact::for_each_leaf(
            self,
            budget,
            |o| {
                for &v in &vars {
                    o.get(v);
                }
            },
            |w, _, _| mass.add_monomial(w, 1),
        )?;
        Ok(mass)
    }
}

impl Model for ConditionalLaw {
    type Var = SiteVar;

    fn factor(&self, var: SiteVar) -> Option<Factor<SiteVar>> {
        let z = var.site();
        let h = self.path.len() as i64;
        match var {
            SiteVar::Omega(_) if (1..=h).contains(&z.level) => {
                let s = z.level as usize;
                let (a, e) = (self.path.at(s), self.path.far_end(s));
                if z.x == a {
                    Some(Factor::constant(var, true))
                } else if a != e && z.x == e {
                    self.pair_factor(s)
                } else if z.x > a.min(e) && z.x < a.max(e) {
                    Some(Factor::constant(var, false))
                } else {
                    Some(exact::iid_factor(var))
                }
            }
            SiteVar::Upsilon(_) if (0..h).contains(&z.level) => {
                let s = z.level as usize + 1;
                if z.x == self.path.at(s - 1) && self.path.increment(s) != 0 {
                    self.pair_factor(s)
                } else {
                    Some(exact::iid_factor(var))
                }
            }
            _ => Some(exact::iid_factor(var)),
        }
    }
}

/// Position at level `to` of the path started at `(x, 0)`, traced next to
/// `pi`. Once it touches `pi` it follows `pi`.
pub fn trace_beside<S: SiteSource + ?Sized>(src: &S, pi: &ConditioningPath, x: i64, to: usize) -> i64 {
    let mut cur = x;
    for s in 0..to {
        if cur == pi.at(s) {
            return pi.at(to);
        }
        cur = hop(src, SiteCoord::new(cur, s as i64))
            .expect("searches stop at the conditioning path")
            .x;
    }
    cur
}

/// An event about one path beside the conditioning path at its final level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SideEvent {
    /// `X_k(L) < X_j(L)`, for a start `k < j`.
    Left { k: i64 },
    /// `X_j(L) < X_n(L)`, for a start `n > j`.
    Right { n: i64 },
}

impl SideEvent {
    fn check(self, pi: &ConditioningPath) -> Result<(), CouplingError> {
        match self {
            SideEvent::Left { k } if k > pi.j() => Err(CouplingError::BadStart { start: k, j: pi.j() }),
            SideEvent::Right { n } if n < pi.j() => Err(CouplingError::BadStart { start: n, j: pi.j() }),
            _ => Ok(()),
        }
    }

    pub fn holds<S: SiteSource + ?Sized>(self, src: &S, pi: &ConditioningPath) -> bool {
        let l = pi.len();
        match self {
            SideEvent::Left { k } => trace_beside(src, pi, k, l) < pi.at(l),
            SideEvent::Right { n } => trace_beside(src, pi, n, l) > pi.at(l),
        }
    }
}

/// Weight polynomial of `event` under the law given `pi`.
pub fn conditional_event_poly(
    event: SideEvent,
    pi: &ConditioningPath,
    budget: u64,
) -> Result<Poly, CouplingError> {
    event.check(pi)?;
    let law = ConditionalLaw::new(pi.clone());
    let mut acc = Poly::zero();
    exact::for_each_leaf(
        &law,
        budget,
        |o| event.holds(&LazySource::new(o, |v| v, SEARCH_CAP), pi),
        |w, _, hit| {
            if hit {
                acc.add_monomial(w, 1)
            }
        },
    )?;
    Ok(acc)
}

/// `P(event | X_j = pi)` in exact arithmetic.
pub fn exact_conditional_probability(
    event: SideEvent,
    pi: &ConditioningPath,
    p: f64,
    budget: u64,
) -> Result<BigRational, CouplingError> {
    let poly = conditional_event_poly(event, pi, budget)?;
    Ok(ExactEvaluator::from_f64(p)?.eval(&poly))
}

/// Whether the step from `(from, s)` lands on `to`, querying only the sites
/// that decide it.
pub(super) fn follows_step<S: SiteSource + ?Sized>(src: &S, from: i64, s: i64, to: i64) -> bool {
    let d = (to - from).abs();
    let level = s + 1;
    for r in 0..d {
        if src.omega(SiteCoord::new(from - r, level)) || src.omega(SiteCoord::new(from + r, level)) {
            return false;
        }
    }
    if !src.omega(SiteCoord::new(to, level)) {
        return false;
    }
    if d == 0 {
        return true;
    }
    let other = 2 * from - to;
    !src.omega(SiteCoord::new(other, level)) || src.upsilon(SiteCoord::new(from, s)) == (to > from)
}

/// Weights of `{event, X_j = pi}` and `{X_j = pi}` under the unconditioned
/// product law.
pub fn bayes_polys(event: SideEvent, pi: &ConditioningPath, budget: u64) -> Result<(Poly, Poly), CouplingError> {
    event.check(pi)?;
    let model = ProductModel {
        x_min: i64::MIN / 4,
        x_max: i64::MAX / 4,
        level_min: i64::MIN / 4,
        level_max: i64::MAX / 4,
    };
    let (mut joint, mut marginal) = (Poly::zero(), Poly::zero());
    exact::for_each_leaf(
        &model,
        budget,
        |o| {
            let src = LazySource::new(o, |v| v, SEARCH_CAP);
            for s in 1..=pi.len() {
                if !follows_step(&src, pi.at(s - 1), s as i64 - 1, pi.at(s)) {
                    return None;
                }
            }
            Some(event.holds(&src, pi))
        },
        |w, _, v| {
            if let Some(hit) = v {
                marginal.add_monomial(w, 1);
                if hit {
                    joint.add_monomial(w, 1);
                }
            }
        },
    )?;
    Ok((joint, marginal))
}

/// The same conditional probability by Bayes' rule under the unconditioned
/// product law: `P(event, X_j = pi) / P(X_j = pi)`.
pub fn bayes_conditional_probability(
    event: SideEvent,
    pi: &ConditioningPath,
    p: f64,
    budget: u64,
) -> Result<BigRational, CouplingError> {
    let (joint, marginal) = bayes_polys(event, pi, budget)?;
    let mut ev = ExactEvaluator::from_f64(p)?;
    Ok(ev.eval(&joint) / ev.eval(&marginal))
}
