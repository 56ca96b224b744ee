//! Exhaustive verification of the monotonicity inequalities and of the
//! couplings behind them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

use num_rational::BigRational;
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::couplings::{BaseSource, CanonicalPair, CoupledSource, CouplingCase, CouplingModel, Rule3Reading};
use super::law::{check_increment_order, trace_beside, ConditionalLaw, ConditioningPath, SideEvent, SEARCH_CAP};
use super::levels::{
    bayes_event_probability, coupled_positions, eval_all, event_probability, joint_side_law, mass_where, side_law,
};
use super::CouplingError;
use crate::environment::SiteCoord;
use crate::exact::{self, ExactEvaluator, LazySource, Poly, SiteVar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Paths stay within `[j - width, j + width]`; side starts range over the
    /// `width` sites on each side of `j`.
    pub width: i64,
    pub height: usize,
}

impl GridSpec {
    pub fn bits(&self) -> u64 {
        2 * self.width as u64 * self.height as u64
    }

    pub fn validate(&self, budget_bits: u32) -> Result<(), CouplingError> {
        if self.width < 1 || self.height < 1 || self.height > 4 {
            return Err(CouplingError::GridShape(format!(
                "need width >= 1 and 1 <= height <= 4, got {}x{}",
                self.width, self.height
            )));
        }
        if self.bits() > budget_bits as u64 {
            return Err(CouplingError::GridTooLarge {
                width: self.width,
                height: self.height,
                bits: self.bits(),
                budget: budget_bits,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub grids: Vec<GridSpec>,
    pub ps: Vec<f64>,
    pub reading: Rule3Reading,
    /// Grid bit budget; each single enumeration may visit `2^budget_bits` leaves.
    pub budget_bits: u32,
    pub workers: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            grids: vec![
                GridSpec { width: 12, height: 1 },
                GridSpec { width: 6, height: 2 },
                GridSpec { width: 4, height: 3 },
            ],
            ps: vec![0.3, 0.5, 0.7],
            reading: Rule3Reading::PathTieBit,
            budget_bits: 24,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Mass,
    Bayes,
    Symmetry,
    IncrementOrder,
    Monotone1,
    Monotone2,
    /// Mapped law equals the target law on the region the left event reads.
    Pushforward,
    /// Same comparison on the whole block window.
    PushforwardFullWindow,
    Cont,
    ContAux,
    /// Full-horizon containment under the auxiliary coupling; not claimed.
    ContUnderAuxiliary,
    Cont1,
    Dom,
    CondIndep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub check: Check,
    pub width: i64,
    pub height: usize,
    pub p: Option<f64>,
    pub pi1: Vec<i64>,
    pub pi2: Option<Vec<i64>>,
    pub t0: Option<usize>,
    pub start: Option<i64>,
    pub case: Option<CouplingCase>,
    pub reading: Option<Rule3Reading>,
    pub detail: String,
}

/// Aggregated findings that are reported but do not count as violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTally {
    pub check: Check,
    pub case: Option<CouplingCase>,
    pub reading: Option<Rule3Reading>,
    pub occurrences: u64,
    pub example: Finding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub width: i64,
    pub height: usize,
    pub paths: usize,
    pub pairs: usize,
    pub probabilities: u64,
    pub distinct_blocks: usize,
    pub containment_runs: u64,
    pub leaves: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub ps: Vec<f64>,
    pub reading: Rule3Reading,
    pub grids: Vec<GridReport>,
    /// How many individual comparisons each check made.
    pub checks: BTreeMap<Check, u64>,
    pub violations: Vec<Finding>,
    pub observations: Vec<ObservationTally>,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// All paths of `height` steps from `j` that stay within `width` of `j`.
pub fn enumerate_paths(j: i64, width: i64, height: usize) -> Vec<ConditioningPath> {
    let mut out = vec![vec![j]];
    for _ in 0..height {
        out = out
            .into_iter()
            .flat_map(|pos| {
                (j - width..=j + width).map(move |x| {
                    let mut next = pos.clone();
                    next.push(x);
                    next
                })
            })
            .collect();
    }
    out.into_iter()
        .map(|p| ConditioningPath::from_positions(p).expect("nonempty"))
        .collect()
}

fn leaf_budget(bits: u32) -> u64 {
    1u64 << bits.min(62)
}

/// Joint weights of the final positions of the paths from `(k, 0)` and
/// `(n, 0)` beside `pi`.
pub fn joint_side_positions(
    pi: &ConditioningPath,
    k: i64,
    n: i64,
    budget: u64,
) -> Result<BTreeMap<(i64, i64), Poly>, CouplingError> {
    let law = ConditionalLaw::new(pi.clone());
    let h = pi.len();
    let dist = exact::distribution(&law, budget, |o| {
        let src = LazySource::new(o, |v| v, SEARCH_CAP);
        (trace_beside(&src, pi, k, h), trace_beside(&src, pi, n, h))
    })?;
    Ok(dist.into_iter().filter_map(|(k, v)| k.map(|k| (k, v))).collect())
}

/// Law of `D = c - 2i - X_k(t0)` given `pi`, with `c, i` taken from the
/// pair's first path.
pub fn d_distribution(
    pair: &CanonicalPair,
    pi: &ConditioningPath,
    k: i64,
    budget: u64,
) -> Result<BTreeMap<i64, Poly>, CouplingError> {
    let law = ConditionalLaw::new(pi.clone());
    let base = pair.c() - 2 * pair.i();
    let dist = exact::distribution(&law, budget, |o| {
        let src = LazySource::new(o, |v| v, SEARCH_CAP);
        base - trace_beside(&src, pi, k, pair.t0)
    })?;
    Ok(dist.into_iter().filter_map(|(k, v)| k.map(|k| (k, v))).collect())
}

/// Variables of level block `s` (`omega(., s)` and `upsilon(., s - 1)`) near
/// the sites where either law or the coupling changes behaviour.
fn block_vars(pair: &CanonicalPair, s: usize, relevant: bool) -> Vec<SiteVar> {
    let (p1, p2) = (&pair.pi1, &pair.pi2);
    let mut om_marks = vec![p1.at(s), p2.at(s), p1.far_end(s), p2.far_end(s)];
    let mut up_marks = vec![p1.at(s - 1), p2.at(s - 1)];
    if s == pair.t0 {
        om_marks.extend([pair.e2(), pair.c() - 1]);
    }
    if s == pair.t0 + 1 {
        up_marks.extend([pair.e2(), pair.e2() + 1, pair.c() - 1, pair.c()]);
    }
    let spread = |marks: Vec<i64>| -> BTreeSet<i64> { marks.into_iter().flat_map(|x| x - 1..=x + 1).collect() };
    let (mut om, mut up) = (spread(om_marks), spread(up_marks));
    if relevant {
        om.retain(|&x| x <= p2.at(s));
        up.retain(|&x| x < p2.at(s - 1));
    }
    let (l, lu) = (s as i64, s as i64 - 1);
    om.into_iter()
        .map(|x| SiteVar::Omega(SiteCoord::new(x, l)))
        .chain(up.into_iter().map(|x| SiteVar::Upsilon(SiteCoord::new(x, lu))))
        .collect()
}

fn pack(bits: impl Iterator<Item = bool>) -> u64 {
    bits.enumerate().fold(0u64, |acc, (i, b)| acc | (u64::from(b) << i))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushforwardOutcome {
    /// Blocks whose mapped law differs from the target, per p.
    pub mismatched_blocks: Vec<(usize, f64)>,
    pub leaves: u64,
}

impl PushforwardOutcome {
    pub fn equal(&self) -> bool {
        self.mismatched_blocks.is_empty()
    }
}

fn block_laws(
    pair: &CanonicalPair,
    case: CouplingCase,
    reading: Rule3Reading,
    s: usize,
    relevant: bool,
    budget: u64,
) -> Result<(BTreeMap<u64, Poly>, BTreeMap<u64, Poly>, u64), CouplingError> {
    let vars = block_vars(pair, s, relevant);
    let model = CouplingModel::new(pair, case)?;
    let mut pushed: BTreeMap<u64, Poly> = BTreeMap::new();
    let mut leaves = exact::for_each_leaf(
        &model,
        budget,
        |o| {
            let r2 = CoupledSource::new(pair, case, reading, |v| o.get(v)).expect("case checked");
            pack(vars.iter().map(|&v| r2.value(v)))
        },
        |w, _, key| pushed.entry(key).or_default().add_monomial(w, 1),
    )?;
    let law2 = ConditionalLaw::new(pair.pi2.clone());
    let mut target: BTreeMap<u64, Poly> = BTreeMap::new();
    leaves += exact::for_each_leaf(
        &law2,
        budget,
        |o| pack(vars.iter().map(|&v| o.get(v))),
        |w, _, key| target.entry(key).or_default().add_monomial(w, 1),
    )?;
    Ok((pushed, target, leaves))
}

fn same_law(a: &BTreeMap<u64, Poly>, b: &BTreeMap<u64, Poly>, ev: &mut ExactEvaluator) -> bool {
    let keys: BTreeSet<u64> = a.keys().chain(b.keys()).copied().collect();
    let zero = Poly::zero();
    keys.into_iter()
        .all(|k| ev.eval(a.get(&k).unwrap_or(&zero)) == ev.eval(b.get(&k).unwrap_or(&zero)))
}

/// Compares, block by block, the law of the coupled second realization with
/// the conditional law given `pi2`. Both realizations are products over
/// blocks and each coupled block only reads the matching input block plus
/// fresh bits, so blockwise equality is equality of the joint laws.
pub fn check_pushforward(
    pair: &CanonicalPair,
    case: CouplingCase,
    reading: Rule3Reading,
    relevant: bool,
    ps: &[f64],
    budget: u64,
) -> Result<PushforwardOutcome, CouplingError> {
    let mut out = PushforwardOutcome {
        mismatched_blocks: Vec::new(),
        leaves: 0,
    };
    for s in 1..=pair.pi1.len() {
        let (pushed, target, leaves) = block_laws(pair, case, reading, s, relevant, budget)?;
        out.leaves += leaves;
        for &p in ps {
            let mut ev = ExactEvaluator::from_f64(p)?;
            if !same_law(&pushed, &target, &mut ev) {
                out.mismatched_blocks.push((s, p));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentTally {
    pub leaves: u64,
    /// Weight of input configurations that break the claimed containment.
    pub violations: Poly,
    pub first_violation: Option<String>,
    /// Weight where the left event holds at the horizon for the first
    /// realization but not the second (auxiliary coupling only).
    pub full_horizon_failures: Poly,
}

/// Realization-wise containment for one start `k < j`:
/// `Case1` checks the left event at the horizon, `Auxiliary` at `t0`, and
/// `KGe2` checks `{D_1 >= m} ⊂ {D_2 >= m}` for every `m >= 2`.
pub fn containment(
    pair: &CanonicalPair,
    case: CouplingCase,
    reading: Rule3Reading,
    k: i64,
    budget: u64,
) -> Result<ContainmentTally, CouplingError> {
    let model = CouplingModel::new(pair, case)?;
    let (h, t0) = (pair.pi1.len(), pair.t0);
    let (c, i) = (pair.c(), pair.i());
    let mut tally = ContainmentTally {
        leaves: 0,
        violations: Poly::zero(),
        first_violation: None,
        full_horizon_failures: Poly::zero(),
    };
    tally.leaves = exact::for_each_leaf(
        &model,
        budget,
        |o| {
            let r1 = BaseSource(|v| o.get(v));
            let r2 = CoupledSource::new(pair, case, reading, |v| o.get(v)).expect("case checked");
            match case {
                CouplingCase::Case1 => {
                    let (a, b) = (trace_beside(&r1, &pair.pi1, k, h), trace_beside(&r2, &pair.pi2, k, h));
                    let bad = a < pair.pi1.at(h) && b >= pair.pi2.at(h);
                    (bad.then(|| format!("X1({h}) = {a}, X2({h}) = {b}")), false)
                }
                CouplingCase::Auxiliary => {
                    let (a, b) = (trace_beside(&r1, &pair.pi1, k, t0), trace_beside(&r2, &pair.pi2, k, t0));
                    let bad = a < c && b > c;
                    let (fa, fb) = (trace_beside(&r1, &pair.pi1, k, h), trace_beside(&r2, &pair.pi2, k, h));
                    let full = fa < pair.pi1.at(h) && fb >= pair.pi2.at(h);
                    (bad.then(|| format!("X1({t0}) = {a}, X2({t0}) = {b}")), full)
                }
                CouplingCase::KGe2 => {
                    let d1 = c - 2 * i - trace_beside(&r1, &pair.pi1, k, t0);
                    let d2 = c - 2 * i - trace_beside(&r2, &pair.pi2, k, t0);
                    ((d1 >= 2 && d2 < d1).then(|| format!("D1 = {d1}, D2 = {d2}")), false)
                }
            }
        },
        |w, _, (bad, full)| {
            if let Some(msg) = bad {
                tally.violations.add_monomial(w, 1);
                tally.first_violation.get_or_insert(msg);
            }
            if full {
                tally.full_horizon_failures.add_monomial(w, 1);
            }
        },
    )?;
    Ok(tally)
}

/// Exact side-event probabilities for one path at every p.
struct PathValues {
    left: Vec<Vec<BigRational>>,
    right: Vec<Vec<BigRational>>,
}

#[derive(Default)]
struct Collector {
    violations: Vec<Finding>,
    observations: BTreeMap<(Check, Option<CouplingCase>, Option<Rule3Reading>), ObservationTally>,
    checks: BTreeMap<Check, u64>,
}

impl Collector {
    fn count(&mut self, check: Check, n: u64) {
        *self.checks.entry(check).or_default() += n;
    }

    fn observe(&mut self, f: Finding) {
        self.tally(f, 1);
    }

    /// Keeps the smallest example so the report does not depend on the
    /// order in which workers finish.
    fn tally(&mut self, f: Finding, n: u64) {
        match self.observations.entry((f.check, f.case, f.reading)) {
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let t = e.get_mut();
                t.occurrences += n;
                if finding_order(&f, &t.example) == std::cmp::Ordering::Less {
                    t.example = f;
                }
            }
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(ObservationTally {
                    check: f.check,
                    case: f.case,
                    reading: f.reading,
                    occurrences: n,
                    example: f,
                });
            }
        }
    }
}

fn finding_order(a: &Finding, b: &Finding) -> std::cmp::Ordering {
    (a.width, a.height, &a.pi1, &a.pi2, a.t0, a.start, &a.detail)
        .cmp(&(b.width, b.height, &b.pi1, &b.pi2, b.t0, b.start, &b.detail))
        .then(a.p.partial_cmp(&b.p).unwrap_or(std::cmp::Ordering::Equal))
}

struct Ctx<'a> {
    grid: GridSpec,
    ps: &'a [f64],
    budget: u64,
}

impl Ctx<'_> {
    fn finding(&self, check: Check, pi1: &ConditioningPath) -> Finding {
        Finding {
            check,
            width: self.grid.width,
            height: self.grid.height,
            p: None,
            pi1: pi1.positions().to_vec(),
            pi2: None,
            t0: None,
            start: None,
            case: None,
            reading: None,
            detail: String::new(),
        }
    }

    fn pair_finding(&self, check: Check, pair: &CanonicalPair) -> Finding {
        Finding {
            pi2: Some(pair.pi2.positions().to_vec()),
            t0: Some(pair.t0),
            ..self.finding(check, &pair.pi1)
        }
    }
}

/// Start offsets `(k - j, n - j)` whose joint law is checked for
/// factorization: the neighbours sharing tie bits with the path, and the
/// outermost starts on one-level grids.
fn condindep_starts(w: i64) -> Vec<(i64, i64)> {
    let near = w.min(2);
    let mut out: Vec<(i64, i64)> = (1..=near).flat_map(|a| (1..=near).map(move |b| (-a, b))).collect();
    out.push((-w, w));
    out.sort();
    out.dedup();
    out
}

fn evaluators(ps: &[f64]) -> Result<Vec<ExactEvaluator>, CouplingError> {
    ps.iter().map(|&p| Ok(ExactEvaluator::from_f64(p)?)).collect()
}

/// Per-path checks: normalization, the Bayes oracle, conditional
/// independence. Returns the side-event values for the comparisons.
fn path_stage(ctx: &Ctx, pi: &ConditioningPath, col: &Mutex<Collector>) -> Result<(PathValues, u64), CouplingError> {
    let w = ctx.grid.width;
    let mut evs = evaluators(ctx.ps)?;
    let mut local = Collector::default();
    let mut probabilities = 0;

    let mass = ConditionalLaw::new(pi.clone()).total_mass(ctx.budget)?;
    for (ev, &p) in evs.iter_mut().zip(ctx.ps) {
        if ev.eval(&mass) != BigRational::one() {
            local.violations.push(Finding {
                p: Some(p),
                detail: format!("total mass {}", ev.eval(&mass)),
                ..ctx.finding(Check::Mass, pi)
            });
        }
    }
    local.count(Check::Mass, ctx.ps.len() as u64);

    let n = ctx.ps.len();
    let mut left = vec![Vec::new(); n];
    let mut right = vec![Vec::new(); n];
    for k in -w..=-1 {
        for event in [SideEvent::Left { k: pi.j() + k }, SideEvent::Right { n: pi.j() - k }] {
            let v = event_probability(event, pi, &mut evs, ctx.budget)?;
            let (joint, marg) = bayes_event_probability(event, pi, &mut evs, ctx.budget)?;
            for idx in 0..n {
                let bayes = &joint[idx] / &marg[idx];
                if v[idx] != bayes {
                    local.violations.push(Finding {
                        p: Some(ctx.ps[idx]),
                        start: Some(match event {
                            SideEvent::Left { k } => k,
                            SideEvent::Right { n } => n,
                        }),
                        detail: format!("{event:?}: conditional law {} vs Bayes {bayes}", v[idx]),
                        ..ctx.finding(Check::Bayes, pi)
                    });
                }
            }
            local.count(Check::Bayes, n as u64);
            match event {
                SideEvent::Left { .. } => left.iter_mut().zip(v).for_each(|(l, x)| l.push(x)),
                SideEvent::Right { .. } => right.iter_mut().zip(v).for_each(|(r, x)| r.push(x)),
            }
            probabilities += 1;
        }
    }

    for (k, m) in condindep_starts(w) {
        let (joint, _) = joint_side_law(pi, pi.j() + k, pi.j() + m, pi.len(), ctx.budget)?;
        let values: BTreeMap<(i64, i64), Vec<BigRational>> =
            joint.iter().map(|(&st, poly)| (st, eval_all(&mut evs, poly))).collect();
        let (mut ml, mut mr): (BTreeMap<i64, Vec<BigRational>>, BTreeMap<i64, Vec<BigRational>>) = Default::default();
        for (&(a, b), v) in &values {
            for (acc, x) in [(ml.entry(a), v), (mr.entry(b), v)] {
                let acc = acc.or_insert_with(|| vec![BigRational::zero(); n]);
                acc.iter_mut().zip(x).for_each(|(s, x)| *s += x);
            }
        }
        for (&a, la) in &ml {
            for (&b, rb) in &mr {
                for idx in 0..n {
                    let j = values.get(&(a, b)).map(|v| v[idx].clone()).unwrap_or_else(BigRational::zero);
                    let prod = &la[idx] * &rb[idx];
                    if j != prod {
                        local.violations.push(Finding {
                            p: Some(ctx.ps[idx]),
                            start: Some(pi.j() + k),
                            detail: format!("P(X_k = {a}, X_n = {b}) = {j} differs from product {prod}"),
                            ..ctx.finding(Check::CondIndep, pi)
                        });
                    }
                }
                local.count(Check::CondIndep, n as u64);
            }
        }
    }

    merge(col, local);
    Ok((PathValues { left, right }, probabilities))
}

fn merge(col: &Mutex<Collector>, local: Collector) {
    let mut g = col.lock().expect("collector lock");
    g.violations.extend(local.violations);
    for (check, n) in local.checks {
        *g.checks.entry(check).or_default() += n;
    }
    for (_, t) in local.observations {
        g.tally(t.example, t.occurrences);
    }
}

/// Key under which a block comparison is translation invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct BlockKey {
    case: CouplingCase,
    reading: Rule3Reading,
    relevant: bool,
    rel: i8,
    step: i64,
    i: i64,
}

fn block_key(pair: &CanonicalPair, case: CouplingCase, reading: Rule3Reading, relevant: bool, s: usize) -> BlockKey {
    let rel = (s as i64 - pair.t0 as i64).clamp(-1, 2) as i8;
    BlockKey {
        case,
        reading: if case == CouplingCase::KGe2 { reading } else { Rule3Reading::PathTieBit },
        relevant,
        rel,
        step: pair.pi1.increment(s),
        i: if rel == 0 || rel == 1 { pair.i() } else { 0 },
    }
}

/// Mismatching p values and enumeration leaves per distinct block.
type BlockMemo = Mutex<HashMap<BlockKey, (Vec<f64>, u64)>>;

/// Mismatching p values for one block, memoized across translates.
fn block_mismatch(
    ctx: &Ctx,
    memo: &BlockMemo,
    pair: &CanonicalPair,
    case: CouplingCase,
    reading: Rule3Reading,
    relevant: bool,
    s: usize,
) -> Result<Vec<f64>, CouplingError> {
    let key = block_key(pair, case, reading, relevant, s);
    if let Some((v, _)) = memo.lock().expect("memo lock").get(&key) {
        return Ok(v.clone());
    }
    let (pushed, target, leaves) = block_laws(pair, case, reading, s, relevant, ctx.budget)?;
    let mut bad = Vec::new();
    for ev in evaluators(ctx.ps)?.iter_mut() {
        if !same_law(&pushed, &target, ev) {
            bad.push(crate::exact::to_f64(ev.p()));
        }
    }
    memo.lock().expect("memo lock").insert(key, (bad.clone(), leaves));
    Ok(bad)
}


fn pair_stage(
    ctx: &Ctx,
    pair: &CanonicalPair,
    reading: Rule3Reading,
    memo: &BlockMemo,
    col: &Mutex<Collector>,
) -> Result<(u64, u64), CouplingError> {
    let mut local = Collector::default();
    let mut evs = evaluators(ctx.ps)?;
    let mut leaves = 0;
    let mut runs = 0;
    let w = ctx.grid.width;

    let order = check_increment_order(&pair.pi1, &pair.pi2)?;
    local.count(Check::IncrementOrder, 1);
    if !order.holds {
        local.violations.push(Finding {
            detail: format!("pi1 not below pi2 at {:?}", order.violation),
            ..ctx.pair_finding(Check::IncrementOrder, pair)
        });
    }

    let readings: &[Rule3Reading] = &[Rule3Reading::PathTieBit, Rule3Reading::Literal];
    for &case in pair.cases() {
        for &rd in readings {
            if case != CouplingCase::KGe2 && rd != Rule3Reading::PathTieBit {
                continue;
            }
            let chosen = case != CouplingCase::KGe2 || rd == reading;
            for relevant in [true, false] {
                for s in 1..=pair.pi1.len() {
                    let bad = block_mismatch(ctx, memo, pair, case, rd, relevant, s)?;
                    let check = if relevant { Check::Pushforward } else { Check::PushforwardFullWindow };
                    local.count(check, ctx.ps.len() as u64);
                    for p in bad {
                        let f = Finding {
                            p: Some(p),
                            case: Some(case),
                            reading: (case == CouplingCase::KGe2).then_some(rd),
                            detail: format!("level block {s} differs from the target law"),
                            ..ctx.pair_finding(check, pair)
                        };
                        if relevant && chosen {
                            local.violations.push(f);
                        } else {
                            local.observe(f);
                        }
                    }
                }
            }
        }

        let (h, t0, c) = (pair.pi1.len(), pair.t0, pair.c());
        let check = match case {
            CouplingCase::Case1 => Check::Cont,
            CouplingCase::Auxiliary => Check::ContAux,
            CouplingCase::KGe2 => Check::Cont1,
        };
        for k in -w..=-1 {
            let start = pair.pi1.j() + k;
            let to = if case == CouplingCase::Case1 { h } else { t0 };
            let (law, l) = coupled_positions(pair, case, reading, start, to, ctx.budget)?;
            leaves += l;
            runs += 1;
            local.count(check, 1);
            let bad = |&(a, b): &(i64, i64)| match case {
                CouplingCase::Case1 => a < pair.pi1.at(h) && b >= pair.pi2.at(h),
                CouplingCase::Auxiliary => a < c && b > c,
                CouplingCase::KGe2 => {
                    let (d1, d2) = (c - 2 * pair.i() - a, c - 2 * pair.i() - b);
                    d1 >= 2 && d2 < d1
                }
            };
            if let Some(&(a, b)) = law.keys().find(|st| bad(st)) {
                local.violations.push(Finding {
                    start: Some(start),
                    case: Some(case),
                    detail: format!("reachable X1({to}) = {a}, X2({to}) = {b}"),
                    ..ctx.pair_finding(check, pair)
                });
            }
            if case == CouplingCase::Auxiliary {
                let (full, l) = coupled_positions(pair, case, reading, start, h, ctx.budget)?;
                leaves += l;
                local.count(Check::ContUnderAuxiliary, 1);
                let fail = eval_all(
                    &mut evs,
                    &mass_where(&full, |&(a, b)| a < pair.pi1.at(h) && b >= pair.pi2.at(h)),
                );
                if !fail[0].is_zero() {
                    local.observe(Finding {
                        start: Some(start),
                        case: Some(case),
                        p: Some(ctx.ps[0]),
                        detail: format!(
                            "full-horizon containment fails with probability {:.6e}",
                            exact::to_f64(&fail[0])
                        ),
                        ..ctx.pair_finding(Check::ContUnderAuxiliary, pair)
                    });
                }
            }
        }
    }

    if pair.i() >= 0 {
        let n = evs.len();
        let base = pair.c() - 2 * pair.i();
        for k in -w..=-1 {
            let start = pair.pi1.j() + k;
            let (d1, l1) = side_law(&pair.pi1, start, pair.t0, ctx.budget)?;
            let (d2, l2) = side_law(&pair.pi2, start, pair.t0, ctx.budget)?;
            leaves += l1 + l2;
            let top = d1.keys().chain(d2.keys()).map(|&x| base - x).max().unwrap_or(0) + 1;
            for m in 0..=top {
                let lhs = eval_all(&mut evs, &mass_where(&d2, |&x| base - x >= m - 1));
                let rhs = eval_all(&mut evs, &mass_where(&d1, |&x| base - x >= m));
                local.count(Check::Dom, n as u64);
                for idx in 0..n {
                    if lhs[idx] < rhs[idx] {
                        local.violations.push(Finding {
                            p: Some(ctx.ps[idx]),
                            start: Some(start),
                            detail: format!("P(D2 >= {}) = {} < P(D1 >= {m}) = {}", m - 1, lhs[idx], rhs[idx]),
                            ..ctx.pair_finding(Check::Dom, pair)
                        });
                    }
                }
            }
        }
    }

    merge(col, local);
    Ok((leaves, runs))
}

fn verify_grid(
    grid: GridSpec,
    opts: &VerifyOptions,
    col: &Mutex<Collector>,
) -> Result<GridReport, CouplingError> {
    grid.validate(opts.budget_bits)?;
    let ctx = Ctx {
        grid,
        ps: &opts.ps,
        budget: leaf_budget(opts.budget_bits),
    };
    let j = 0;
    let paths = enumerate_paths(j, grid.width, grid.height);
    let staged: Vec<(PathValues, u64)> = paths
        .par_iter()
        .map(|pi| path_stage(&ctx, pi, col))
        .collect::<Result<_, _>>()?;
    let index: HashMap<&ConditioningPath, usize> = paths.iter().enumerate().map(|(i, p)| (p, i)).collect();
    let probabilities = staged.iter().map(|(_, n)| n).sum();
    let values: Vec<&PathValues> = staged.iter().map(|(v, _)| v).collect();
    let w = grid.width as usize;

    let mut local = Collector::default();
    // symmetry: right event for pi at n equals left event for pi^- at 2j - n
    for (a, pi) in paths.iter().enumerate() {
        let b = index[&pi.reflected()];
        for (idx, &p) in opts.ps.iter().enumerate() {
            for r in 0..w {
                // right[r] is n = j + (w - r); its mirror is k = j - (w - r) = left[r]
                if values[a].right[idx][r] != values[b].left[idx][r] {
                    local.violations.push(Finding {
                        p: Some(p),
                        start: Some(j + (w - r) as i64),
                        detail: "right event differs from the mirrored left event".into(),
                        ..ctx.finding(Check::Symmetry, pi)
                    });
                }
            }
            local.count(Check::Symmetry, w as u64);
        }
    }

    let pairs: Vec<CanonicalPair> = paths
        .iter()
        .flat_map(|pi| (1..=grid.height).map(move |t0| CanonicalPair::new(pi.clone(), t0).expect("t0 in range")))
        .filter(|pr| pr.pi2.within(j - grid.width, j + grid.width))
        .collect();

    for pr in &pairs {
        let (a, b) = (index[&pr.pi1], index[&pr.pi2]);
        for (idx, &p) in opts.ps.iter().enumerate() {
            for r in 0..w {
                let start = j - (w - r) as i64;
                let (l1, l2) = (&values[a].left[idx][r], &values[b].left[idx][r]);
                if l1 > l2 {
                    local.violations.push(Finding {
                        p: Some(p),
                        start: Some(start),
                        detail: format!("{l1} > {l2}"),
                        ..ctx.pair_finding(Check::Monotone1, pr)
                    });
                }
                let (r1, r2) = (&values[a].right[idx][r], &values[b].right[idx][r]);
                if r1 < r2 {
                    local.violations.push(Finding {
                        p: Some(p),
                        start: Some(j + (w - r) as i64),
                        detail: format!("{r1} < {r2}"),
                        ..ctx.pair_finding(Check::Monotone2, pr)
                    });
                }
            }
            local.count(Check::Monotone1, w as u64);
            local.count(Check::Monotone2, w as u64);
        }
    }
    merge(col, local);

    let memo: BlockMemo = Mutex::new(HashMap::new());
    let tallies: Vec<(u64, u64)> = pairs
        .par_iter()
        .map(|pr| pair_stage(&ctx, pr, opts.reading, &memo, col))
        .collect::<Result<_, _>>()?;
    let memo = memo.into_inner().expect("memo lock");
    let block_leaves: u64 = memo.values().map(|(_, l)| l).sum();
    Ok(GridReport {
        width: grid.width,
        height: grid.height,
        paths: paths.len(),
        pairs: pairs.len(),
        probabilities,
        distinct_blocks: memo.len(),
        containment_runs: tallies.iter().map(|t| t.1).sum(),
        leaves: block_leaves + tallies.iter().map(|t| t.0).sum::<u64>(),
    })
}

/// Runs every check on every grid. Findings are sorted so the report does
/// not depend on scheduling.
pub fn verify_monotonicity(opts: &VerifyOptions) -> Result<MonotonicityReport, CouplingError> {
    for g in &opts.grids {
        g.validate(opts.budget_bits)?;
    }
    for &p in &opts.ps {
        ExactEvaluator::from_f64(p)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| CouplingError::Pool(e.to_string()))?;
    let col = Mutex::new(Collector::default());
    let grids = pool.install(|| {
        opts.grids
            .iter()
            .map(|&g| verify_grid(g, opts, &col))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let col = col.into_inner().expect("collector lock");
    let mut violations = col.violations;
    violations.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
    Ok(MonotonicityReport {
        ps: opts.ps.clone(),
        reading: opts.reading,
        grids,
        checks: col.checks,
        violations,
        observations: col.observations.into_values().collect(),
    })
}
