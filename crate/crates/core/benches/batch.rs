use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thrustwalk_core::dynamics::{forward_kinematics, RobotParams, RobotState, Side};
use thrustwalk_core::gait::leg_ik;
use thrustwalk_core::harness::{run_simulation, SimConfig};
use thrustwalk_core::numerics::Vec3;
use thrustwalk_core::parallel;

fn short_runs(n: u64) -> Vec<SimConfig> {
    (0..n)
        .map(|seed| {
            let mut cfg = SimConfig::default();
            cfg.sim.duration = Some(0.25);
            cfg.sim.seed = seed;
            cfg.initial.joint_noise = 0.01;
            cfg
        })
        .collect()
}

fn ik_roundtrip(target: &Vec3) -> f64 {
    let p = RobotParams::default();
    let Ok(a) = leg_ik(target, &p, Side::Left) else { return 0.0 };
    let mut s = RobotState::default();
    s.joints.set_leg(Side::Left, a);
    let foot = forward_kinematics(&p, &s).leg(Side::Left).foot - p.l1(Side::Left);
    (foot - target).norm()
}

fn bench_batches(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulation_batch");
    g.sample_size(10);
    let cfgs = short_runs(8);
    g.bench_with_input(BenchmarkId::new("sequential", cfgs.len()), &cfgs, |b, cfgs| {
        b.iter(|| parallel::map_sequential(cfgs, |c| black_box(run_simulation(c).samples.len())))
    });
    g.bench_with_input(BenchmarkId::new("parallel", cfgs.len()), &cfgs, |b, cfgs| {
        b.iter(|| parallel::map(cfgs, |c| black_box(run_simulation(c).samples.len())))
    });
    g.finish();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let targets: Vec<Vec3> =
        (0..20_000).map(|_| Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(0.05..0.15), rng.gen_range(-0.55..-0.35))).collect();
    let mut g = c.benchmark_group("ik_oracle_batch");
    g.bench_function("sequential", |b| b.iter(|| parallel::map_sequential(&targets, ik_roundtrip)));
    g.bench_function("parallel", |b| b.iter(|| parallel::map(&targets, ik_roundtrip)));
    g.finish();
}

criterion_group!(benches, bench_batches);
criterion_main!(benches);
