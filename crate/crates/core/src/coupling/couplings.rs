//! Couplings of the conditional laws given two paths that differ by a unit
//! shift from some level on.
//!
//! The second realization is always built from a first one (drawn from the
//! law given `pi1`) plus independent fresh bits, so one enumeration over the
//! inputs yields both realizations at once.

use serde::{Deserialize, Serialize};

use super::law::{ConditionalLaw, ConditioningPath, FAR_CLOSED_HALF, FAR_OPEN, SEARCH_CAP};
use super::CouplingError;
use crate::environment::{SiteCoord, SiteSource};
use crate::exact::{Factor, Model, Monomial, SiteVar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingCase {
    /// The path stepped left at `t0`.
    Case1,
    /// Mirror image of `Case1`, for steps `>= 0`.
    Auxiliary,
    /// The four-rule coupling behind the domination of `D` for `k >= 2`.
    KGe2,
}

/// Where the tie bit of rule 3 of the four-rule coupling lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rule3Reading {
    /// `upsilon_2(e, t0)` at the rule-3 site itself.
    Literal,
    /// The path's own tie bit `upsilon_2(pi(t0-1), t0-1)`, which is the one
    /// paired with `omega_2(e, t0)` in the target law.
    #[default]
    PathTieBit,
}

/// `pi2 = pi1` before `t0` and `pi1 + 1` from `t0` on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalPair {
    pub pi1: ConditioningPath,
    pub pi2: ConditioningPath,
    pub t0: usize,
}

impl CanonicalPair {
    pub fn new(pi1: ConditioningPath, t0: usize) -> Result<Self, CouplingError> {
        if t0 == 0 || t0 > pi1.len() {
            return Err(CouplingError::BadT0 { t0, len: pi1.len() });
        }
        Ok(Self {
            pi2: pi1.shifted_from(t0),
            pi1,
            t0,
        })
    }

    /// `pi1(t0)`.
    pub fn c(&self) -> i64 {
        self.pi1.at(self.t0)
    }

    /// `pi1(t0 - 1)`.
    pub fn b(&self) -> i64 {
        self.pi1.at(self.t0 - 1)
    }

    /// The step of `pi1` at `t0`.
    pub fn i(&self) -> i64 {
        self.c() - self.b()
    }

    /// Far end of `pi2`'s step at `t0`, `c - 2i - 1`.
    pub fn e2(&self) -> i64 {
        self.c() - 2 * self.i() - 1
    }

    pub fn cases(&self) -> &'static [CouplingCase] {
        if self.i() < 0 {
            &[CouplingCase::Case1]
        } else {
            &[CouplingCase::Auxiliary, CouplingCase::KGe2]
        }
    }

    pub fn check_case(&self, case: CouplingCase) -> Result<(), CouplingError> {
        if self.cases().contains(&case) {
            Ok(())
        } else {
            Err(CouplingError::CaseMismatch { case, step: self.i() })
        }
    }
}

/// Inputs of a coupling: the first realization, fresh bits keyed by the
/// site they end up at, and the coin `xi` of rule 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CVar {
    Base(SiteVar),
    Fresh(SiteVar),
    Xi,
}

/// Joint law of the coupling inputs.
#[derive(Debug, Clone)]
pub struct CouplingModel<'a> {
    pub law1: ConditionalLaw,
    pub pair: &'a CanonicalPair,
    pub case: CouplingCase,
}

impl<'a> CouplingModel<'a> {
    pub fn new(pair: &'a CanonicalPair, case: CouplingCase) -> Result<Self, CouplingError> {
        pair.check_case(case)?;
        Ok(Self {
            law1: ConditionalLaw::new(pair.pi1.clone()),
            pair,
            case,
        })
    }
}

impl Model for CouplingModel<'_> {
    type Var = CVar;

    fn factor(&self, var: CVar) -> Option<Factor<CVar>> {
        match var {
            CVar::Base(v) => self.law1.factor(v).map(|f| Factor {
                vars: f.vars.into_iter().map(CVar::Base).collect(),
                outcomes: f.outcomes,
            }),
            CVar::Fresh(SiteVar::Omega(z)) => {
                // Only the auxiliary coupling draws fresh sites: the two
                // uncovered sites left of pi2(t0), from the target marginals.
                if self.pair.i() == 0 && z.x == self.pair.c() - 1 {
                    let closed = FAR_CLOSED_HALF.times(Monomial { two: 1, ..Monomial::ONE });
                    Some(Factor::bernoulli(var, FAR_OPEN, closed))
                } else {
                    Some(Factor::constant(var, false))
                }
            }
            CVar::Fresh(SiteVar::Upsilon(_)) => Some(Factor::bernoulli(var, Monomial::HALF, Monomial::HALF)),
            CVar::Xi => Some(Factor::bernoulli(
                var,
                Monomial {
                    inv_two_minus_p: 1,
                    ..Monomial::ONE
                },
                FAR_CLOSED_HALF,
            )),
        }
    }
}

/// The second realization, computed on demand from coupling inputs.
pub struct CoupledSource<'p, G> {
    get: G,
    pair: &'p CanonicalPair,
    case: CouplingCase,
    reading: Rule3Reading,
}

impl<'p, G: Fn(CVar) -> bool> CoupledSource<'p, G> {
    pub fn new(
        pair: &'p CanonicalPair,
        case: CouplingCase,
        reading: Rule3Reading,
        get: G,
    ) -> Result<Self, CouplingError> {
        pair.check_case(case)?;
        Ok(Self {
            get,
            pair,
            case,
            reading,
        })
    }

    fn base(&self, v: SiteVar) -> bool {
        (self.get)(CVar::Base(v))
    }

    fn fresh(&self, v: SiteVar) -> bool {
        (self.get)(CVar::Fresh(v))
    }

    fn rule3_active(&self) -> bool {
        let e = self.pair.e2();
        (self.get)(CVar::Xi) && self.base(SiteVar::Omega(SiteCoord::new(e, self.pair.t0 as i64)))
    }

    /// Value of a variable at level `t0` (either field, same site rules).
    fn at_t0(&self, v: SiteVar) -> bool {
        let x = v.site().x;
        let (c, e) = (self.pair.c(), self.pair.e2());
        match self.case {
            CouplingCase::Case1 => {
                if x <= c + 1 {
                    self.base(v.shifted(-1))
                } else {
                    self.base(v.shifted(1))
                }
            }
            CouplingCase::Auxiliary => {
                if x > c {
                    self.base(v.shifted(-1))
                } else if x <= c - 2 {
                    self.base(v.shifted(1))
                } else {
                    self.fresh(v)
                }
            }
            CouplingCase::KGe2 => match v {
                _ if x > c => self.base(v.shifted(-1)),
                _ if x < e => self.base(v),
                SiteVar::Omega(_) if x > e => false,
                SiteVar::Upsilon(_) if x > e => self.fresh(v),
                SiteVar::Omega(_) => self.rule3_active(),
                SiteVar::Upsilon(_) => match self.reading {
                    Rule3Reading::Literal => self.rule3_active() || self.fresh(v),
                    Rule3Reading::PathTieBit => self.base(v),
                },
            },
        }
    }

    pub fn value(&self, v: SiteVar) -> bool {
        let t0 = self.pair.t0 as i64;
        let z = v.site();
        if z.level > t0 {
            return self.base(v.shifted(-1));
        }
        if z.level == t0 {
            return self.at_t0(v);
        }
        let path_tie = self.case == CouplingCase::KGe2
            && self.reading == Rule3Reading::PathTieBit
            && v == SiteVar::Upsilon(SiteCoord::new(self.pair.b(), t0 - 1));
        if path_tie {
            self.rule3_active() || self.fresh(v)
        } else {
            self.base(v)
        }
    }
}

impl<G: Fn(CVar) -> bool> SiteSource for CoupledSource<'_, G> {
    fn omega(&self, z: SiteCoord) -> bool {
        self.value(SiteVar::Omega(z))
    }
    fn upsilon(&self, z: SiteCoord) -> bool {
        self.value(SiteVar::Upsilon(z))
    }
    fn search_cap(&self) -> u64 {
        SEARCH_CAP
    }
}

/// The first realization seen through the coupling inputs.
pub struct BaseSource<G>(pub G);

impl<G: Fn(CVar) -> bool> SiteSource for BaseSource<G> {
    fn omega(&self, z: SiteCoord) -> bool {
        (self.0)(CVar::Base(SiteVar::Omega(z)))
    }
    fn upsilon(&self, z: SiteCoord) -> bool {
        (self.0)(CVar::Base(SiteVar::Upsilon(z)))
    }
    fn search_cap(&self) -> u64 {
        SEARCH_CAP
    }
}

/// Applies a coupling to concrete inputs: `base` is a realization of the
/// law given `pi1`, `fresh` supplies independent bits and `xi` the rule-3
/// coin. The returned source is the matching realization given `pi2`.
pub fn apply_coupling<'a, B: SiteSource, F: SiteSource>(
    case: CouplingCase,
    reading: Rule3Reading,
    pair: &'a CanonicalPair,
    base: &'a B,
    fresh: &'a F,
    xi: bool,
) -> Result<CoupledSource<'a, impl Fn(CVar) -> bool + 'a>, CouplingError> {
    let get = move |v: CVar| match v {
        CVar::Base(SiteVar::Omega(z)) => base.omega(z),
        CVar::Base(SiteVar::Upsilon(z)) => base.upsilon(z),
        CVar::Fresh(SiteVar::Omega(z)) => {
            pair.i() == 0 && z.x == pair.c() - 1 && fresh.omega(z)
        }
        CVar::Fresh(SiteVar::Upsilon(z)) => fresh.upsilon(z),
        CVar::Xi => xi,
    };
    CoupledSource::new(pair, case, reading, get)
}

/// Convenience for tests and reports: every variable the coupling reads.
pub fn inputs_of(pair: &CanonicalPair, case: CouplingCase, reading: Rule3Reading, v: SiteVar) -> Vec<CVar> {
    let seen = std::cell::RefCell::new(Vec::new());
    let src = CoupledSource {
        get: |c: CVar| {
            seen.borrow_mut().push(c);
            true
        },
        pair,
        case,
        reading,
    };
    src.value(v);
    let mut out = seen.into_inner();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Environment;

    fn pair(inc: &[i64], t0: usize) -> CanonicalPair {
        CanonicalPair::new(ConditioningPath::from_increments(0, inc), t0).unwrap()
    }

    #[test]
    fn canonical_pair_geometry() {
        let pr = pair(&[2, -3], 2);
        assert_eq!(pr.pi2.positions(), &[0, 2, 0]);
        assert_eq!((pr.b(), pr.c(), pr.i()), (2, -1, -3));
        assert_eq!(pr.cases(), &[CouplingCase::Case1]);
        assert!(CanonicalPair::new(pr.pi1.clone(), 0).is_err());
        assert!(CanonicalPair::new(pr.pi1.clone(), 3).is_err());
        let up = pair(&[1], 1);
        assert_eq!(up.e2(), -2);
        assert!(CouplingModel::new(&up, CouplingCase::Case1).is_err());
    }

    #[test]
    fn case1_shifts_around_the_new_target() {
        let pr = pair(&[0, -2], 2);
        let c = pr.c();
        let v = SiteVar::Omega(SiteCoord::new(c + 1, 2));
        assert_eq!(
            inputs_of(&pr, CouplingCase::Case1, Rule3Reading::PathTieBit, v),
            vec![CVar::Base(SiteVar::Omega(SiteCoord::new(c, 2)))]
        );
        let w = SiteVar::Omega(SiteCoord::new(c + 2, 2));
        assert_eq!(
            inputs_of(&pr, CouplingCase::Case1, Rule3Reading::PathTieBit, w),
            vec![CVar::Base(SiteVar::Omega(SiteCoord::new(c + 3, 2)))]
        );
    }

    #[test]
    fn readings_differ_only_in_tie_bits() {
        let pr = pair(&[1, 1], 2);
        let e = pr.e2();
        let lit = |v| inputs_of(&pr, CouplingCase::KGe2, Rule3Reading::Literal, v);
        let tie = |v| inputs_of(&pr, CouplingCase::KGe2, Rule3Reading::PathTieBit, v);
        let om = SiteVar::Omega(SiteCoord::new(e, 2));
        assert_eq!(lit(om), tie(om));
        let ue = SiteVar::Upsilon(SiteCoord::new(e, 2));
        assert_eq!(tie(ue), vec![CVar::Base(ue)]);
        assert!(lit(ue).contains(&CVar::Xi));
        let ub = SiteVar::Upsilon(SiteCoord::new(pr.b(), 1));
        assert_eq!(lit(ub), vec![CVar::Base(ub)]);
        assert!(tie(ub).contains(&CVar::Xi));
    }

    #[test]
    fn concrete_application_keeps_the_target_open() {
        let pr = pair(&[1, 0, -1], 2);
        let base = Environment::new(3, 0.5).unwrap();
        let fresh = Environment::new(4, 0.5).unwrap();
        let r2 = apply_coupling(CouplingCase::KGe2, Rule3Reading::PathTieBit, &pr, &base, &fresh, true).unwrap();
        // rule 2 closes (e2, c]
        for x in pr.e2() + 1..=pr.c() {
            assert!(!r2.omega(SiteCoord::new(x, 2)));
        }
        // levels below t0 are untouched
        for x in -5..5 {
            let z = SiteCoord::new(x, 1);
            assert_eq!(r2.omega(z), base.omega(z));
        }
    }
}
