//! Level-by-level evaluation of the laws the verifier compares.
//!
//! The conditional law, the product law and every coupling are products over
//! level blocks (block `s` holds `omega(., s)` and `upsilon(., s - 1)`), and a
//! hop from level `s - 1` reads block `s` only. Walks beside the conditioning
//! path are therefore Markov chains over levels whose one-step kernels are
//! exact enumerations of a single block. The whole-history enumerations in
//! `law` and `verify` stay as the oracles these chains are tested against.

use std::collections::BTreeMap;
use std::ops::Range;

use num_rational::BigRational;

use super::couplings::{BaseSource, CanonicalPair, CoupledSource, CouplingCase, CouplingModel, Rule3Reading};
use super::law::{follows_step, ConditionalLaw, ConditioningPath, SideEvent, SEARCH_CAP};
use super::CouplingError;
use crate::environment::{SiteCoord, SiteSource};
use crate::exact::{self, ExactEvaluator, LazySource, Model, Monomial, Oracle, Poly, ProductModel};
use crate::network::hop;

/// Weight polynomial of each state.
pub type Law<K> = BTreeMap<K, Poly>;

/// Position at level `s + 1` of a walk at `(x, s)` beside `pi`.
pub fn step_beside<S: SiteSource + ?Sized>(src: &S, pi: &ConditioningPath, x: i64, s: usize) -> i64 {
    if x == pi.at(s) {
        pi.at(s + 1)
    } else {
        hop(src, SiteCoord::new(x, s as i64))
            .expect("searches stop at the conditioning path")
            .x
    }
}

/// Pushes `start` through the transitions `s -> s + 1` for `s` in `levels`.
/// A step returning `None` drops the branch (its weight leaves the law).
/// Returns the law and the number of enumerated leaves.
pub fn evolve<M: Model, K: Ord + Clone>(
    model: &M,
    budget: u64,
    start: K,
    levels: Range<usize>,
    step: impl Fn(&Oracle<M>, &K, usize) -> Option<K>,
) -> Result<(Law<K>, u64), CouplingError> {
    let mut law: Law<K> = BTreeMap::from([(start, Poly::monomial(Monomial::ONE))]);
    let mut leaves = 0;
    for s in levels {
        let mut next: Law<K> = BTreeMap::new();
        for (k, w) in &law {
            let mut kernel: BTreeMap<K, Poly> = BTreeMap::new();
            let mut leaked = false;
            leaves += exact::for_each_leaf(
                model,
                budget,
                |o| step(o, k, s),
                |m, outside, to| {
                    leaked |= outside;
                    if let Some(to) = to {
                        kernel.entry(to).or_default().add_monomial(m, 1);
                    }
                },
            )?;
            if leaked {
                return Err(CouplingError::WindowLeak);
            }
            for (to, poly) in kernel {
                next.entry(to).or_default().add(&w.mul(&poly));
            }
        }
        law = next;
    }
    Ok((law, leaves))
}

/// Exact value of `poly` at each evaluator's `p`.
pub fn eval_all(evs: &mut [ExactEvaluator], poly: &Poly) -> Vec<BigRational> {
    evs.iter_mut().map(|ev| ev.eval(poly)).collect()
}

/// Law of `X_x(to)` given `X_j = pi`.
pub fn side_law(
    pi: &ConditioningPath,
    x: i64,
    to: usize,
    budget: u64,
) -> Result<(Law<i64>, u64), CouplingError> {
    let law = ConditionalLaw::new(pi.clone());
    evolve(&law, budget, x, 0..to, |o, &x, s| {
        Some(step_beside(&LazySource::new(o, |v| v, SEARCH_CAP), pi, x, s))
    })
}

/// Joint law of `(X_a(to), X_b(to))` given `X_j = pi`.
pub fn joint_side_law(
    pi: &ConditioningPath,
    a: i64,
    b: i64,
    to: usize,
    budget: u64,
) -> Result<(Law<(i64, i64)>, u64), CouplingError> {
    let law = ConditionalLaw::new(pi.clone());
    evolve(&law, budget, (a, b), 0..to, |o, &(x, y), s| {
        let src = LazySource::new(o, |v| v, SEARCH_CAP);
        Some((step_beside(&src, pi, x, s), step_beside(&src, pi, y, s)))
    })
}

/// Total weight of the states where `pred` holds.
pub fn mass_where<K>(law: &Law<K>, pred: impl Fn(&K) -> bool) -> Poly {
    let mut acc = Poly::zero();
    for (k, w) in law {
        if pred(k) {
            acc.add(w);
        }
    }
    acc
}

/// `P(event | X_j = pi)` for each evaluator.
pub fn event_probability(
    event: SideEvent,
    pi: &ConditioningPath,
    evs: &mut [ExactEvaluator],
    budget: u64,
) -> Result<Vec<BigRational>, CouplingError> {
    let (l, end) = (pi.len(), pi.at(pi.len()));
    let (start, left) = match event {
        SideEvent::Left { k } => (k, true),
        SideEvent::Right { n } => (n, false),
    };
    let (law, _) = side_law(pi, start, l, budget)?;
    Ok(eval_all(evs, &mass_where(&law, |&y| if left { y < end } else { y > end })))
}

const UNBOUNDED: ProductModel = ProductModel {
    x_min: i64::MIN / 4,
    x_max: i64::MAX / 4,
    level_min: i64::MIN / 4,
    level_max: i64::MAX / 4,
};

/// `P(event, X_j = pi)` and `P(X_j = pi)` under the unconditioned product
/// law, for each evaluator.
pub fn bayes_event_probability(
    event: SideEvent,
    pi: &ConditioningPath,
    evs: &mut [ExactEvaluator],
    budget: u64,
) -> Result<(Vec<BigRational>, Vec<BigRational>), CouplingError> {
    let (l, end) = (pi.len(), pi.at(pi.len()));
    let (start, left) = match event {
        SideEvent::Left { k } => (k, true),
        SideEvent::Right { n } => (n, false),
    };
    let (law, _) = evolve(&UNBOUNDED, budget, start, 0..l, |o, &x, s| {
        let src = LazySource::new(o, |v| v, SEARCH_CAP);
        // the path's own constraints first: they bound every search
        follows_step(&src, pi.at(s), s as i64, pi.at(s + 1)).then(|| hop(&src, SiteCoord::new(x, s as i64)).expect("bounded").x)
    })?;
    let joint = eval_all(evs, &mass_where(&law, |&y| if left { y < end } else { y > end }));
    let (path, _) = evolve(&UNBOUNDED, budget, (), 0..l, |o, _, s| {
        let src = LazySource::new(o, |v| v, SEARCH_CAP);
        follows_step(&src, pi.at(s), s as i64, pi.at(s + 1)).then_some(())
    })?;
    let marginal = eval_all(evs, &path.into_values().next().unwrap_or_default());
    Ok((joint, marginal))
}

/// Joint law of `(X_k(to)` under the first realization, `X_k(to)` under the
/// coupled second one`)`.
pub fn coupled_positions(
    pair: &CanonicalPair,
    case: CouplingCase,
    reading: Rule3Reading,
    k: i64,
    to: usize,
    budget: u64,
) -> Result<(Law<(i64, i64)>, u64), CouplingError> {
    // the literal reading ties upsilon(., t0) to omega(., t0): blocks t0 and
    // t0 + 1 then form one transition
    if reading == Rule3Reading::Literal && case == CouplingCase::KGe2 && to > pair.t0 {
        return Err(CouplingError::GridShape(
            "literal rule-3 reading couples two level blocks; evaluate it by whole-history enumeration".into(),
        ));
    }
    let model = CouplingModel::new(pair, case)?;
    evolve(&model, budget, (k, k), 0..to, |o, &(a, b), s| {
        let r1 = BaseSource(|v| o.get(v));
        let r2 = CoupledSource::new(pair, case, reading, |v| o.get(v)).expect("case checked");
        Some((step_beside(&r1, &pair.pi1, a, s), step_beside(&r2, &pair.pi2, b, s)))
    })
}
