//! The hop map, traced paths, and coalescence bookkeeping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{SiteCoord, SiteSource};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetworkError {
    #[error("no open site within distance {cap} of {from:?} on the next level")]
    SearchOverflow { from: SiteCoord, cap: u64 },
    #[error("start points must share a level and be ordered left to right: {u:?}, {v:?}")]
    InvalidPair { u: SiteCoord, v: SiteCoord },
    #[error("interval [{a}, {b}] is empty")]
    EmptyInterval { a: i64, b: i64 },
}

/// Successor of `z`: the closest open site on the next level, ties broken by
/// `upsilon(z)` (`false` = left).
#[inline]
pub fn hop<S: SiteSource + ?Sized>(src: &S, z: SiteCoord) -> Result<SiteCoord, NetworkError> {
    let level = z.level + 1;
    if src.omega(SiteCoord::new(z.x, level)) {
        return Ok(SiteCoord::new(z.x, level));
    }
    let cap = src.search_cap();
    for d in 1..=cap as i64 {
        let left = src.omega(SiteCoord::new(z.x - d, level));
        let right = src.omega(SiteCoord::new(z.x + d, level));
        let x = match (left, right) {
            (false, false) => continue,
            (true, false) => z.x - d,
            (false, true) => z.x + d,
            (true, true) => {
                if src.upsilon(z) {
                    z.x + d
                } else {
                    z.x - d
                }
            }
        };
        return Ok(SiteCoord::new(x, level));
    }
    Err(NetworkError::SearchOverflow { from: z, cap })
}

/// A traced trajectory: `positions[k]` is the abscissa at `start.level + k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticePath {
    pub start: SiteCoord,
    pub positions: Vec<i64>,
}

impl LatticePath {
    pub fn steps(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn end(&self) -> SiteCoord {
        SiteCoord::new(
            *self.positions.last().expect("paths are never empty"),
            self.start.level + self.steps() as i64,
        )
    }

    pub fn increments(&self) -> impl Iterator<Item = i64> + '_ {
        self.positions.windows(2).map(|w| w[1] - w[0])
    }
}

pub fn trace<S: SiteSource + ?Sized>(
    src: &S,
    z: SiteCoord,
    steps: usize,
) -> Result<LatticePath, NetworkError> {
    let mut positions = Vec::with_capacity(steps + 1);
    positions.push(z.x);
    let mut cur = z;
    for _ in 0..steps {
        cur = hop(src, cur)?;
        positions.push(cur.x);
    }
    Ok(LatticePath { start: z, positions })
}

/// `Z_t = X^v_t - X^u_t` for `t = 0..=horizon` (relative to the common level).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifferenceProcess {
    pub u: SiteCoord,
    pub v: SiteCoord,
    pub values: Vec<i64>,
}

impl DifferenceProcess {
    pub fn first_zero(&self) -> Option<usize> {
        self.values.iter().position(|&z| z == 0)
    }
}

fn check_pair(u: SiteCoord, v: SiteCoord) -> Result<(), NetworkError> {
    if u.level != v.level || u.x > v.x {
        return Err(NetworkError::InvalidPair { u, v });
    }
    Ok(())
}

pub fn difference_process<S: SiteSource + ?Sized>(
    src: &S,
    u: SiteCoord,
    v: SiteCoord,
    horizon: usize,
) -> Result<DifferenceProcess, NetworkError> {
    check_pair(u, v)?;
    let mut values = Vec::with_capacity(horizon + 1);
    let (mut a, mut b) = (u, v);
    values.push(b.x - a.x);
    for _ in 0..horizon {
        if a == b {
            // coalesced paths follow the same hops from here on
            values.push(0);
            continue;
        }
        a = hop(src, a)?;
        b = hop(src, b)?;
        debug_assert!(a.x <= b.x, "paths crossed");
        values.push(b.x - a.x);
    }
    Ok(DifferenceProcess { u, v, values })
}

/// First meeting time, or censoring at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoalescenceTime {
    Coalesced(u64),
    Censored { horizon: u64 },
}

impl CoalescenceTime {
    /// `tau > t`, for `t` no larger than the tracing horizon.
    pub fn survives(&self, t: u64) -> bool {
        match *self {
            CoalescenceTime::Coalesced(tau) => tau > t,
            CoalescenceTime::Censored { horizon } => {
                debug_assert!(t <= horizon);
                true
            }
        }
    }
}

/// Traces both paths until they meet or `horizon` steps elapse.
pub fn coalescence_time<S: SiteSource + ?Sized>(
    src: &S,
    u: SiteCoord,
    v: SiteCoord,
    horizon: u64,
) -> Result<CoalescenceTime, NetworkError> {
    check_pair(u, v)?;
    let (mut a, mut b) = (u, v);
    for t in 0..=horizon {
        if a.x == b.x {
            return Ok(CoalescenceTime::Coalesced(t));
        }
        if t == horizon {
            break;
        }
        a = hop(src, a)?;
        b = hop(src, b)?;
        debug_assert!(a.x <= b.x, "paths crossed");
    }
    Ok(CoalescenceTime::Censored { horizon })
}

/// Number of distinct abscissas at level `t0 + t` reached by the paths
/// started from every integer of `[a, b]` at level `t0`.
///
/// Paths never cross, so the surviving positions stay sorted and merging
/// reduces to dropping adjacent duplicates.
pub fn eta_count<S: SiteSource + ?Sized>(
    src: &S,
    a: i64,
    b: i64,
    t0: i64,
    t: u64,
) -> Result<usize, NetworkError> {
    if a > b {
        return Err(NetworkError::EmptyInterval { a, b });
    }
    let mut alive: Vec<i64> = (a..=b).collect();
    let mut next = Vec::with_capacity(alive.len());
    for s in 0..t {
        if alive.len() == 1 {
            break;
        }
        let level = t0 + s as i64;
        next.clear();
        for &x in &alive {
            let y = hop(src, SiteCoord::new(x, level))?.x;
            match next.last() {
                Some(&last) if last == y => {}
                Some(&last) => {
                    debug_assert!(last < y, "paths crossed");
                    next.push(y);
                }
                None => next.push(y),
            }
        }
        std::mem::swap(&mut alive, &mut next);
    }
    Ok(alive.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Environment;
    use std::collections::HashSet;

    /// A hand-written field: explicit open sites and right-tie sites.
    struct Fixed {
        open: HashSet<(i64, i64)>,
        right_ties: HashSet<(i64, i64)>,
    }

    impl Fixed {
        fn new(open: &[(i64, i64)], right_ties: &[(i64, i64)]) -> Self {
            Self {
                open: open.iter().copied().collect(),
                right_ties: right_ties.iter().copied().collect(),
            }
        }
    }

    impl SiteSource for Fixed {
        fn omega(&self, z: SiteCoord) -> bool {
            self.open.contains(&(z.x, z.level))
        }
        fn upsilon(&self, z: SiteCoord) -> bool {
            self.right_ties.contains(&(z.x, z.level))
        }
        fn search_cap(&self) -> u64 {
            16
        }
    }

    #[test]
    fn hop_straight_up() {
        let f = Fixed::new(&[(3, 1), (2, 1), (4, 1)], &[]);
        assert_eq!(hop(&f, SiteCoord::new(3, 0)).unwrap(), SiteCoord::new(3, 1));
    }

    #[test]
    fn hop_unique_minimizer() {
        let f = Fixed::new(&[(-2, 1), (5, 1)], &[]);
        assert_eq!(hop(&f, SiteCoord::new(0, 0)).unwrap(), SiteCoord::new(-2, 1));
    }

    #[test]
    fn hop_tie_break() {
        let f = Fixed::new(&[(-1, 1), (1, 1)], &[]);
        assert_eq!(hop(&f, SiteCoord::new(0, 0)).unwrap(), SiteCoord::new(-1, 1));
        let g = Fixed::new(&[(-1, 1), (1, 1)], &[(0, 0)]);
        assert_eq!(hop(&g, SiteCoord::new(0, 0)).unwrap(), SiteCoord::new(1, 1));
        // the tie bit of the *target* level is irrelevant
        let h = Fixed::new(&[(-1, 1), (1, 1)], &[(0, 1)]);
        assert_eq!(hop(&h, SiteCoord::new(0, 0)).unwrap(), SiteCoord::new(-1, 1));
    }

    #[test]
    fn hop_overflow() {
        let f = Fixed::new(&[(100, 1)], &[]);
        assert_eq!(
            hop(&f, SiteCoord::new(0, 0)),
            Err(NetworkError::SearchOverflow {
                from: SiteCoord::new(0, 0),
                cap: 16
            })
        );
    }

    #[test]
    fn trace_basics() {
        let env = Environment::new(11, 0.4).unwrap();
        let z = SiteCoord::new(-7, 3);
        assert_eq!(trace(&env, z, 0).unwrap().positions, vec![-7]);
        let a = trace(&env, z, 200).unwrap();
        let b = trace(&env, z, 200).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positions.len(), 201);
        assert_eq!(a.end().level, 203);
        let frozen = Environment::new(11, 1.0).unwrap();
        assert!(trace(&frozen, z, 50).unwrap().positions.iter().all(|&x| x == -7));
    }

    #[test]
    fn difference_process_contract() {
        let env = Environment::new(3, 0.5).unwrap();
        let u = SiteCoord::new(0, 0);
        let same = difference_process(&env, u, u, 30).unwrap();
        assert!(same.values.iter().all(|&z| z == 0));
        let d = difference_process(&env, u, SiteCoord::new(5, 0), 500).unwrap();
        assert_eq!(d.values[0], 5);
        assert_eq!(d.values.len(), 501);
        if let Some(t) = d.first_zero() {
            assert!(d.values[t..].iter().all(|&z| z == 0));
        }
        assert!(d.values.iter().all(|&z| z >= 0));
        assert!(difference_process(&env, SiteCoord::new(2, 0), u, 3).is_err());
        assert!(difference_process(&env, u, SiteCoord::new(2, 1), 3).is_err());
    }

    #[test]
    fn coalescence_time_contract() {
        let env = Environment::new(8, 0.5).unwrap();
        let u = SiteCoord::new(0, 0);
        assert_eq!(
            coalescence_time(&env, u, u, 10).unwrap(),
            CoalescenceTime::Coalesced(0)
        );
        let frozen = Environment::new(8, 1.0).unwrap();
        assert_eq!(
            coalescence_time(&frozen, u, SiteCoord::new(1, 0), 1000).unwrap(),
            CoalescenceTime::Censored { horizon: 1000 }
        );
        for seed in 0..50 {
            let env = Environment::new(seed, 0.5).unwrap();
            let v = SiteCoord::new(3, 0);
            let d = difference_process(&env, u, v, 400).unwrap();
            let tau = coalescence_time(&env, u, v, 400).unwrap();
            match (tau, d.first_zero()) {
                (CoalescenceTime::Coalesced(t), Some(z)) => assert_eq!(t as usize, z),
                (CoalescenceTime::Censored { .. }, None) => {}
                other => panic!("disagreement {other:?}"),
            }
        }
    }

    #[test]
    fn eta_count_contract() {
        let env = Environment::new(21, 0.5).unwrap();
        assert_eq!(eta_count(&env, 4, 4, 0, 10).unwrap(), 1);
        let frozen = Environment::new(21, 1.0).unwrap();
        assert_eq!(eta_count(&frozen, 0, 3, 0, 25).unwrap(), 4);
        assert!(eta_count(&env, 3, 2, 0, 1).is_err());
        let mut prev = usize::MAX;
        for t in [1u64, 2, 4, 8, 16, 64, 256] {
            let eta = eta_count(&env, -10, 10, 5, t).unwrap();
            assert!(eta <= prev);
            prev = eta;
        }
    }

    #[test]
    fn eta_matches_brute_force() {
        for seed in 0..20 {
            let env = Environment::new(seed, 0.35).unwrap();
            let brute: HashSet<i64> = (-6..=6)
                .map(|x| *trace(&env, SiteCoord::new(x, 2), 40).unwrap().positions.last().unwrap())
                .collect();
            assert_eq!(eta_count(&env, -6, 6, 2, 40).unwrap(), brute.len());
        }
    }

    #[test]
    fn eta_two_iff_boundary_pair_apart() {
        for seed in 0..200 {
            let env = Environment::new(seed, 0.5).unwrap();
            let eta = eta_count(&env, 0, 6, 0, 30).unwrap();
            let tau = coalescence_time(&env, SiteCoord::new(0, 0), SiteCoord::new(6, 0), 30).unwrap();
            assert_eq!(eta >= 2, tau.survives(30), "seed {seed}");
        }
    }
}
