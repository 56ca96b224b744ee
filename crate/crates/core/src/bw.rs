//! Coalescing Brownian motions: closed-form meeting probabilities and an
//! Euler simulator with bridge-corrected crossing detection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::proportion_stderr;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BwError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("start {index} is out of order: later start times first, equal times need increasing positions")]
    UnorderedStarts { index: usize },
    #[error("no starting points given")]
    NoStarts,
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

fn positive(name: &'static str, value: f64) -> Result<(), BwError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(BwError::NonPositive { name, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmPairSpec {
    pub epsilon: f64,
    pub t: f64,
    pub diffusion: f64,
}

impl BmPairSpec {
    pub fn unit(epsilon: f64, t: f64) -> Self {
        Self {
            epsilon,
            t,
            diffusion: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), BwError> {
        positive("epsilon", self.epsilon)?;
        positive("t", self.t)?;
        positive("diffusion", self.diffusion)
    }
}

/// `P(two motions started epsilon apart have not met by t)`,
/// i.e. `2 Phi(eps / (sqrt(2t) D)) - 1`, written as an erf to keep full
/// relative accuracy for small arguments.
pub fn bw_meet_survival(spec: &BmPairSpec) -> Result<f64, BwError> {
    spec.validate()?;
    Ok(libm::erf(spec.epsilon / (2.0 * spec.t.sqrt() * spec.diffusion)))
}

/// Starting point `(y, s)`: position `y` at time `s`.
pub type BmStart = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmSimulation {
    pub starts: Vec<BmStart>,
    pub step: f64,
    pub horizon: f64,
    pub diffusion: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmRun {
    pub times: Vec<f64>,
    /// `paths[i][k]` is the position of path `i` at `times[k]`, NaN before it starts.
    pub paths: Vec<Vec<f64>>,
    /// First grid time at which each path shares its position with another.
    pub first_merge: Vec<Option<f64>>,
}

impl BmRun {
    pub fn endpoints(&self) -> Vec<f64> {
        self.paths.iter().map(|p| *p.last().unwrap()).collect()
    }
}

#[derive(Debug, Clone)]
struct Cluster {
    x: f64,
    members: Vec<usize>,
}

impl BmSimulation {
    pub fn validate(&self) -> Result<(), BwError> {
        positive("step", self.step)?;
        positive("horizon", self.horizon)?;
        positive("diffusion", self.diffusion)?;
        if self.starts.is_empty() {
            return Err(BwError::NoStarts);
        }
        for (i, w) in self.starts.windows(2).enumerate() {
            let ((y0, s0), (y1, s1)) = (w[0], w[1]);
            if s1 < s0 || (s1 == s0 && y1 <= y0) {
                return Err(BwError::UnorderedStarts { index: i + 1 });
            }
        }
        Ok(())
    }

    pub fn run(&self) -> Result<BmRun, BwError> {
        self.validate()?;
        let n_steps = (self.horizon / self.step).round().max(1.0) as usize;
        let dt = self.horizon / n_steps as f64;
        let times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();
        let n = self.starts.len();
        let mut paths = vec![vec![f64::NAN; n_steps + 1]; n];
        let mut first_merge = vec![None; n];
        let mut clusters: Vec<Cluster> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = self.diffusion * dt.sqrt();
        let bridge_var = 2.0 * self.diffusion * self.diffusion * dt;
        let mut next_start = 0;

        for (k, &now) in times.iter().enumerate() {
            if k > 0 {
                let old: Vec<f64> = clusters.iter().map(|c| c.x).collect();
                for c in clusters.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    c.x += scale * z;
                }
                // Bridge crossing between neighbours that stayed ordered.
                let mut join = vec![false; clusters.len().saturating_sub(1)];
                for i in 0..join.len() {
                    let d1 = old[i + 1] - old[i];
                    let d2 = clusters[i + 1].x - clusters[i].x;
                    join[i] = if d2 <= 0.0 {
                        true
                    } else {
                        let u: f64 = rng.random();
                        u < (-2.0 * d1 * d2 / bridge_var).exp()
                    };
                }
                clusters = merge_flagged(clusters, &join);
            }
            while next_start < n && self.starts[next_start].1 <= now + 1e-12 * self.horizon {
                let y = self.starts[next_start].0;
                let at = clusters.partition_point(|c| c.x < y);
                clusters.insert(
                    at,
                    Cluster {
                        x: y,
                        members: vec![next_start],
                    },
                );
                next_start += 1;
            }
            resolve_inversions(&mut clusters);
            for c in &clusters {
                for &m in &c.members {
                    paths[m][k] = c.x;
                    if c.members.len() > 1 && first_merge[m].is_none() {
                        first_merge[m] = Some(now);
                    }
                }
            }
        }
        Ok(BmRun {
            times,
            paths,
            first_merge,
        })
    }
}

fn combine(a: Cluster, b: Cluster) -> Cluster {
    let (na, nb) = (a.members.len() as f64, b.members.len() as f64);
    let mut members = a.members;
    members.extend(b.members);
    members.sort_unstable();
    Cluster {
        x: (a.x * na + b.x * nb) / (na + nb),
        members,
    }
}

fn merge_flagged(clusters: Vec<Cluster>, join: &[bool]) -> Vec<Cluster> {
    let mut out: Vec<Cluster> = Vec::with_capacity(clusters.len());
    for (i, c) in clusters.into_iter().enumerate() {
        if i > 0 && join[i - 1] {
            let prev = out.pop().unwrap();
            out.push(combine(prev, c));
        } else {
            out.push(c);
        }
    }
    out
}

/// Merges neighbours until positions are strictly increasing.
fn resolve_inversions(clusters: &mut Vec<Cluster>) {
    let mut i = 0;
    while i + 1 < clusters.len() {
        if clusters[i + 1].x <= clusters[i].x {
            let b = clusters.remove(i + 1);
            let a = std::mem::replace(&mut clusters[i], Cluster { x: 0.0, members: vec![] });
            clusters[i] = combine(a, b);
            i = i.saturating_sub(1);
        } else {
            i += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmPairEstimate {
    pub survival: f64,
    pub stderr: f64,
    pub n: u64,
    pub reference: f64,
}

/// Survival frequency of two simulated coalescing motions started
/// `epsilon` apart, against the closed form.
pub fn bm_pair_survival(
    spec: &BmPairSpec,
    step: f64,
    replicates: u64,
    seed: u64,
    workers: usize,
) -> Result<BmPairEstimate, BwError> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BwError::Pool(e.to_string()))?;
    let survived: Result<Vec<bool>, BwError> = pool.install(|| {
        (0..replicates)
            .into_par_iter()
            .map(|i| {
                let sim = BmSimulation {
                    starts: vec![(0.0, 0.0), (spec.epsilon, 0.0)],
                    step,
                    horizon: spec.t,
                    diffusion: spec.diffusion,
                    seed: crate::mc::replicate_seed(seed, i),
                };
                Ok(sim.run()?.first_merge[0].is_none())
            })
            .collect()
    });
    let hits = survived?.iter().filter(|&&b| b).count() as u64;
    let v = hits as f64 / replicates as f64;
    Ok(BmPairEstimate {
        survival: v,
        stderr: proportion_stderr(v, replicates),
        n: replicates,
        reference: bw_meet_survival(spec)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survival_reference_value() {
        let v = bw_meet_survival(&BmPairSpec::unit(1.0, 0.5)).unwrap();
        // 2 Phi(1) - 1
        assert!((v - 0.682_689_492_137_085_9).abs() < 1e-15);
        let tiny = bw_meet_survival(&BmPairSpec::unit(1e-12, 1.0)).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-11);
        assert!(bw_meet_survival(&BmPairSpec::unit(1.0, 1e-12)).unwrap() == 1.0);
        assert!(bw_meet_survival(&BmPairSpec::unit(0.0, 1.0)).is_err());
        assert!(bw_meet_survival(&BmPairSpec::unit(1.0, -1.0)).is_err());
    }

    #[test]
    fn survival_monotone_on_grid() {
        for i in 1..20 {
            for j in 1..20 {
                let (e, t) = (i as f64 * 0.1, j as f64 * 0.1);
                let s = bw_meet_survival(&BmPairSpec::unit(e, t)).unwrap();
                assert!(s < bw_meet_survival(&BmPairSpec::unit(e + 0.1, t)).unwrap());
                assert!(s > bw_meet_survival(&BmPairSpec::unit(e, t + 0.1)).unwrap());
            }
        }
    }

    #[test]
    fn survival_is_order_epsilon() {
        let t0 = 0.1;
        let sups: Vec<f64> = (1..=6)
            .map(|k| {
                let e = 0.5f64.powi(k);
                (0..=100)
                    .map(|i| t0 + i as f64 * (2.0 - t0) / 100.0)
                    .map(|t| bw_meet_survival(&BmPairSpec::unit(e, t)).unwrap() / e)
                    .fold(0.0, f64::max)
            })
            .collect();
        // bounded by 1 / sqrt(pi t0)
        let bound = 1.0 / (std::f64::consts::PI * t0).sqrt();
        assert!(sups.iter().all(|&s| s <= bound + 1e-12));
    }

    #[test]
    fn start_validation() {
        let mut sim = BmSimulation {
            starts: vec![(0.0, 0.0), (0.0, 0.0)],
            step: 0.01,
            horizon: 1.0,
            diffusion: 1.0,
            seed: 1,
        };
        assert_eq!(sim.validate(), Err(BwError::UnorderedStarts { index: 1 }));
        sim.starts = vec![(1.0, 0.5), (0.0, 0.0)];
        assert!(sim.validate().is_err());
        sim.starts = vec![(1.0, 0.0), (0.0, 0.5)];
        assert!(sim.validate().is_ok());
    }

    #[test]
    fn paths_stay_ordered_and_merge_for_good() {
        let sim = BmSimulation {
            starts: vec![(0.0, 0.0), (0.1, 0.0), (0.2, 0.0), (-0.5, 0.3)],
            step: 1e-3,
            horizon: 2.0,
            diffusion: 1.0,
            seed: 42,
        };
        let run = sim.run().unwrap();
        for k in 0..run.times.len() {
            let xs: Vec<f64> = (0..3).map(|i| run.paths[i][k]).collect();
            assert!(xs[0] <= xs[1] && xs[1] <= xs[2]);
        }
        assert!(run.paths[3][0].is_nan());
        for i in 0..3 {
            if let Some(tm) = run.first_merge[i] {
                let k0 = run.times.iter().position(|&t| t == tm).unwrap();
                let shares = |k: usize| (0..4).any(|j| j != i && run.paths[j][k] == run.paths[i][k]);
                assert!((k0..run.times.len()).all(shares));
            }
        }
    }

    #[test]
    fn single_path_variance() {
        let ends: Vec<f64> = (0..4000)
            .map(|s| {
                BmSimulation {
                    starts: vec![(0.0, 0.0)],
                    step: 0.01,
                    horizon: 2.0,
                    diffusion: 1.5,
                    seed: s,
                }
                .run()
                .unwrap()
                .endpoints()[0]
            })
            .collect();
        let (_, var) = crate::stats::mean_variance(&ends);
        let target = 1.5 * 1.5 * 2.0;
        // stderr of a normal sample variance: target sqrt(2 / (n - 1))
        assert!((var - target).abs() < 3.0 * target * (2.0 / 3999.0f64).sqrt());
    }

    #[test]
    fn pair_survival_matches_closed_form() {
        let spec = BmPairSpec::unit(1.0, 0.5);
        let est = bm_pair_survival(&spec, 5e-4, 3000, 9, 1).unwrap();
        assert!((est.survival - est.reference).abs() < 3.0 * est.stderr + 0.01, "{est:?}");
    }
}
