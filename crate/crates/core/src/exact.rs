//! Exact enumeration machinery.
//!
//! Probabilities of finite lattice events are built from per-variable weights
//! that are all monomials `p^a q^b (2-p)^-c 2^d`. An [`Oracle`] hands out
//! variable values lazily while a computation runs and the enumerator replays
//! the computation depth-first over every outcome of every variable it
//! actually touched, so only the relevant part of the environment is ever
//! branched on. Leaf weights are aggregated into [`Poly`]s and evaluated in
//! exact rational arithmetic at the end.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Debug;
use std::hash::Hash;
use std::rc::Rc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{SiteCoord, SiteSource};

/// `p^p q^q (2-p)^(-inv_two_minus_p) 2^two`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Monomial {
    pub p: u32,
    pub q: u32,
    pub inv_two_minus_p: u32,
    pub two: i32,
}

impl Monomial {
    pub const ONE: Monomial = Monomial {
        p: 0,
        q: 0,
        inv_two_minus_p: 0,
        two: 0,
    };
    pub const P: Monomial = Monomial {
        p: 1,
        ..Monomial::ONE
    };
    pub const Q: Monomial = Monomial {
        q: 1,
        ..Monomial::ONE
    };
    pub const HALF: Monomial = Monomial {
        two: -1,
        ..Monomial::ONE
    };

    pub fn times(self, o: Monomial) -> Monomial {
        Monomial {
            p: self.p + o.p,
            q: self.q + o.q,
            inv_two_minus_p: self.inv_two_minus_p + o.inv_two_minus_p,
            two: self.two + o.two,
        }
    }

    pub fn f64_at(self, p: f64) -> f64 {
        let q = 1.0 - p;
        p.powi(self.p as i32)
            * q.powi(self.q as i32)
            * (2.0 - p).powi(-(self.inv_two_minus_p as i32))
            * 2f64.powi(self.two)
    }
}

/// A polynomial with nonnegative integer coefficients over [`Monomial`]s.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Poly {
    terms: BTreeMap<Monomial, u128>,
}

impl Poly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn monomial(m: Monomial) -> Self {
        let mut p = Self::zero();
        p.add_monomial(m, 1);
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_monomial(&mut self, m: Monomial, coeff: u128) {
        if coeff > 0 {
            let c = self.terms.entry(m).or_insert(0);
            *c = c.checked_add(coeff).expect("polynomial coefficient overflow");
        }
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (&a, &x) in &self.terms {
            for (&b, &y) in &other.terms {
                out.add_monomial(a.times(b), x.checked_mul(y).expect("polynomial coefficient overflow"));
            }
        }
        out
    }

    pub fn add(&mut self, other: &Poly) {
        for (&m, &c) in &other.terms {
            self.add_monomial(m, c);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &u128)> {
        self.terms.iter()
    }

    pub fn eval_f64(&self, p: f64) -> f64 {
        let mut acc = crate::stats::KahanSum::new();
        for (&m, &c) in &self.terms {
            acc.add(c as f64 * m.f64_at(p));
        }
        acc.value()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExactError {
    #[error("probability {0} has no exact decimal form in (0, 1)")]
    NotAProbability(f64),
    #[error("enumeration exceeded its budget of {budget} leaves")]
    BudgetExceeded { budget: u64 },
}

/// The exact rational a user meant by `p`: its shortest decimal
/// representation (`0.3` becomes `3/10`).
pub fn exact_probability(p: f64) -> Result<BigRational, ExactError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ExactError::NotAProbability(p));
    }
    let text = format!("{p}");
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let digits = format!("{int_part}{frac_part}");
    let numer: BigInt = digits.parse().map_err(|_| ExactError::NotAProbability(p))?;
    let denom = num_traits::pow(BigInt::from(10), frac_part.len());
    Ok(BigRational::new(numer, denom))
}

/// Evaluates [`Poly`]s exactly at a fixed rational `p = a / d`.
///
/// Terms are brought over the common denominator
/// `d^max(P+Q) (2d - a)^max(C) 2^-min(T)` and summed as integers, so a
/// polynomial costs one gcd however many terms it has.
#[derive(Debug, Clone)]
pub struct ExactEvaluator {
    p: BigRational,
    // powers of a, d - a, d and 2d - a
    pows: [Vec<BigInt>; 4],
}

impl ExactEvaluator {
    pub fn new(p: BigRational) -> Self {
        let (a, d) = (p.numer().clone(), p.denom().clone());
        let bases = [a.clone(), &d - &a, d.clone(), BigInt::from(2) * &d - &a];
        Self {
            p,
            pows: bases.map(|b| vec![BigInt::one(), b]),
        }
    }

    pub fn from_f64(p: f64) -> Result<Self, ExactError> {
        Ok(Self::new(exact_probability(p)?))
    }

    pub fn p(&self) -> &BigRational {
        &self.p
    }

    pub fn q(&self) -> BigRational {
        BigRational::one() - &self.p
    }

    fn pow(&mut self, which: usize, e: u32) -> &BigInt {
        let e = e as usize;
        let v = &mut self.pows[which];
        while v.len() <= e {
            let next = v.last().unwrap() * &v[1];
            v.push(next);
        }
        &v[e]
    }

    pub fn monomial(&mut self, m: Monomial) -> BigRational {
        self.eval(&Poly::monomial(m))
    }

    pub fn eval(&mut self, poly: &Poly) -> BigRational {
        let Some(first) = poly.terms.keys().next() else {
            return BigRational::zero();
        };
        let (mut max_e, mut max_c, mut min_t) = (0, 0, first.two);
        for m in poly.terms.keys() {
            max_e = max_e.max(m.p + m.q);
            max_c = max_c.max(m.inv_two_minus_p);
            min_t = min_t.min(m.two);
        }
        let mut numer = BigInt::zero();
        for (&m, &c) in &poly.terms {
            let mut t = BigInt::from(c) * self.pow(0, m.p);
            t *= self.pow(1, m.q);
            t *= self.pow(2, m.inv_two_minus_p + max_e - m.p - m.q);
            t *= self.pow(3, max_c - m.inv_two_minus_p);
            numer += t << (m.two - min_t) as usize;
        }
        let mut denom = self.pow(2, max_e).clone();
        denom *= self.pow(3, max_c);
        if min_t >= 0 {
            numer <<= min_t as usize;
        } else {
            denom <<= (-min_t) as usize;
        }
        BigRational::new(numer, denom)
    }
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// A variable of the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteVar {
    Omega(SiteCoord),
    Upsilon(SiteCoord),
}

impl SiteVar {
    pub fn site(self) -> SiteCoord {
        match self {
            SiteVar::Omega(z) | SiteVar::Upsilon(z) => z,
        }
    }

    pub fn shifted(self, dx: i64) -> SiteVar {
        match self {
            SiteVar::Omega(z) => SiteVar::Omega(SiteCoord::new(z.x + dx, z.level)),
            SiteVar::Upsilon(z) => SiteVar::Upsilon(SiteCoord::new(z.x + dx, z.level)),
        }
    }

    pub fn at(self, x: i64) -> SiteVar {
        self.shifted(x - self.site().x)
    }
}

/// A joint law over a few variables: each outcome assigns bit `i` to
/// `vars[i]`. Outcomes with zero weight are simply absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor<V> {
    pub vars: Vec<V>,
    pub outcomes: Vec<(u32, Monomial)>,
}

impl<V> Factor<V> {
    pub fn constant(var: V, value: bool) -> Self {
        Self {
            vars: vec![var],
            outcomes: vec![(u32::from(value), Monomial::ONE)],
        }
    }

    /// `P(true) = w_true`, `P(false) = w_false`.
    pub fn bernoulli(var: V, w_true: Monomial, w_false: Monomial) -> Self {
        Self {
            vars: vec![var],
            outcomes: vec![(0, w_false), (1, w_true)],
        }
    }

    pub fn mass(&self) -> Poly {
        let mut p = Poly::zero();
        for &(_, w) in &self.outcomes {
            p.add_monomial(w, 1);
        }
        p
    }
}

/// Supplies the factor containing each variable. Factors must partition the
/// variables: every variable of a returned factor maps back to that factor.
pub trait Model {
    type Var: Copy + Eq + Hash + Debug;

    /// `None` marks a variable outside the enumeration window.
    fn factor(&self, var: Self::Var) -> Option<Factor<Self::Var>>;
}

#[derive(Debug)]
struct OracleState<V> {
    values: FxHashMap<V, bool>,
    trail: Vec<(usize, usize)>,
    replay: Vec<usize>,
    weight: Monomial,
    outside: bool,
}

type FactorCache<V> = FxHashMap<V, Option<Rc<Factor<V>>>>;

/// Lazy view of one branch of the enumeration.
pub struct Oracle<'m, M: Model> {
    model: &'m M,
    state: RefCell<OracleState<M::Var>>,
    factors: RefCell<FactorCache<M::Var>>,
}

impl<'m, M: Model> Oracle<'m, M> {
    fn new(model: &'m M) -> Self {
        Self {
            model,
            state: RefCell::new(OracleState {
                values: FxHashMap::default(),
                trail: Vec::new(),
                replay: Vec::new(),
                weight: Monomial::ONE,
                outside: false,
            }),
            factors: RefCell::new(FxHashMap::default()),
        }
    }

    /// Starts the next branch; factors stay cached.
    fn reset(&self, replay: Vec<usize>) {
        let mut st = self.state.borrow_mut();
        st.values.clear();
        st.trail.clear();
        st.replay = replay;
        st.weight = Monomial::ONE;
        st.outside = false;
    }

    fn factor(&self, var: M::Var) -> Option<Rc<Factor<M::Var>>> {
        if let Some(f) = self.factors.borrow().get(&var) {
            return f.clone();
        }
        let f = self.model.factor(var).map(Rc::new);
        let mut cache = self.factors.borrow_mut();
        match &f {
            Some(f) => {
                for &v in &f.vars {
                    cache.insert(v, Some(f.clone()));
                }
            }
            None => {
                cache.insert(var, None);
            }
        }
        f
    }

    pub fn get(&self, var: M::Var) -> bool {
        if let Some(&v) = self.state.borrow().values.get(&var) {
            return v;
        }
        let Some(factor) = self.factor(var) else {
            self.state.borrow_mut().outside = true;
            return false;
        };
        debug_assert!(!factor.outcomes.is_empty());
        let mut st = self.state.borrow_mut();
        let depth = st.trail.len();
        let choice = st.replay.get(depth).copied().unwrap_or(0);
        st.trail.push((choice, factor.outcomes.len()));
        let (bits, w) = factor.outcomes[choice];
        st.weight = st.weight.times(w);
        let mut out = false;
        for (i, &v) in factor.vars.iter().enumerate() {
            let b = bits >> i & 1 == 1;
            st.values.insert(v, b);
            if v == var {
                out = b;
            }
        }
        out
    }
}

/// Visits every leaf of the lazy enumeration of `run`.
///
/// `on_leaf` receives the leaf weight, whether the branch left the window,
/// and the value `run` returned.
pub fn for_each_leaf<M: Model, T>(
    model: &M,
    budget: u64,
    mut run: impl FnMut(&Oracle<M>) -> T,
    mut on_leaf: impl FnMut(Monomial, bool, T),
) -> Result<u64, ExactError> {
    let oracle = Oracle::new(model);
    let mut leaves = 0u64;
    loop {
        leaves += 1;
        if leaves > budget {
            return Err(ExactError::BudgetExceeded { budget });
        }
        let value = run(&oracle);
        let mut st = oracle.state.borrow_mut();
        on_leaf(st.weight, st.outside, value);
        let trail = &mut st.trail;
        loop {
            match trail.pop() {
                None => return Ok(leaves),
                Some((choice, n)) if choice + 1 < n => {
                    trail.push((choice + 1, n));
                    break;
                }
                Some(_) => {}
            }
        }
        let replay = trail.iter().map(|&(c, _)| c).collect();
        drop(st);
        oracle.reset(replay);
    }
}

/// Aggregates leaf weights by the value returned from `run`; branches that
/// left the window are collected under `None`.
pub fn distribution<M: Model, T: Ord>(
    model: &M,
    budget: u64,
    run: impl FnMut(&Oracle<M>) -> T,
) -> Result<BTreeMap<Option<T>, Poly>, ExactError> {
    let mut out: BTreeMap<Option<T>, Poly> = BTreeMap::new();
    for_each_leaf(model, budget, run, |w, outside, v| {
        let key = if outside { None } else { Some(v) };
        out.entry(key).or_default().add_monomial(w, 1);
    })?;
    Ok(out)
}

/// Exposes an oracle as a [`SiteSource`] through a variable mapping.
pub struct LazySource<'o, 'm, M: Model, F> {
    oracle: &'o Oracle<'m, M>,
    map: F,
    cap: u64,
}

impl<'o, 'm, M: Model, F: Fn(SiteVar) -> M::Var> LazySource<'o, 'm, M, F> {
    pub fn new(oracle: &'o Oracle<'m, M>, map: F, cap: u64) -> Self {
        Self { oracle, map, cap }
    }
}

impl<M: Model, F: Fn(SiteVar) -> M::Var> SiteSource for LazySource<'_, '_, M, F> {
    fn omega(&self, z: SiteCoord) -> bool {
        self.oracle.get((self.map)(SiteVar::Omega(z)))
    }
    fn upsilon(&self, z: SiteCoord) -> bool {
        self.oracle.get((self.map)(SiteVar::Upsilon(z)))
    }
    fn search_cap(&self) -> u64 {
        self.cap
    }
}

/// The unconditioned product law, restricted to a rectangular window.
#[derive(Debug, Clone, Copy)]
pub struct ProductModel {
    pub x_min: i64,
    pub x_max: i64,
    pub level_min: i64,
    pub level_max: i64,
}

impl ProductModel {
    pub fn contains(&self, z: SiteCoord) -> bool {
        (self.x_min..=self.x_max).contains(&z.x) && (self.level_min..=self.level_max).contains(&z.level)
    }
}

pub fn iid_factor(var: SiteVar) -> Factor<SiteVar> {
    match var {
        SiteVar::Omega(_) => Factor::bernoulli(var, Monomial::P, Monomial::Q),
        SiteVar::Upsilon(_) => Factor::bernoulli(var, Monomial::HALF, Monomial::HALF),
    }
}

impl Model for ProductModel {
    type Var = SiteVar;

    fn factor(&self, var: SiteVar) -> Option<Factor<SiteVar>> {
        self.contains(var.site()).then(|| iid_factor(var))
    }
}
