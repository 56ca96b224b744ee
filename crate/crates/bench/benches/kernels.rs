use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drainage_core::analytics::{joint_one_step_pmf, JointOptions};
use drainage_core::coupling::{conditional_event_poly, ConditioningPath, SideEvent};
use drainage_core::environment::{Environment, SiteCoord, SiteSource};
use drainage_core::mc::{estimate_tau_tail, ExperimentConfig};
use drainage_core::network::{coalescence_time, trace};

fn environment(c: &mut Criterion) {
    let env = Environment::new(42, 0.5).unwrap();
    c.bench_function("omega lookup", |b| {
        let mut x = 0i64;
        b.iter(|| {
            x += 1;
            env.omega(SiteCoord::new(x, x >> 3))
        })
    });
}

fn paths(c: &mut Criterion) {
    let mut g = c.benchmark_group("trace");
    for p in [0.3, 0.5, 0.7] {
        let env = Environment::new(7, p).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(p), &env, |b, env| {
            b.iter(|| trace(env, SiteCoord::new(0, 0), 10_000).unwrap())
        });
    }
    g.finish();
    let env = Environment::new(9, 0.5).unwrap();
    c.bench_function("coalescence separation 8", |b| {
        b.iter(|| coalescence_time(&env, SiteCoord::new(0, 0), SiteCoord::new(8, 0), 100_000).unwrap())
    });
}

fn replicates(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::new(0.5, 1, 1000);
    cfg.horizons = vec![10, 100, 1000];
    let mut g = c.benchmark_group("monte carlo");
    g.sample_size(10);
    g.bench_function("tau tail 1000 replicates", |b| b.iter(|| estimate_tau_tail(&cfg, 1).unwrap()));
    g.finish();
}

fn exact(c: &mut Criterion) {
    let mut g = c.benchmark_group("exact");
    g.sample_size(10);
    g.bench_function("joint one step m=4", |b| {
        b.iter(|| joint_one_step_pmf(0.5, 4, JointOptions::default()).unwrap())
    });
    let pi = ConditioningPath::from_increments(0, &[1, -1]);
    g.bench_function("conditional left event H=2", |b| {
        b.iter(|| conditional_event_poly(SideEvent::Left { k: -3 }, &pi, 1 << 24).unwrap())
    });
    g.finish();
}

criterion_group!(benches, environment, paths, replicates, exact);
criterion_main!(benches);
