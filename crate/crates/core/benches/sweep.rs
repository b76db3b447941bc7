use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rhythmic_core::experiment::{train_twin, ExperimentConfig, ExperimentKind};
use rhythmic_core::learner::{closed_loop_predict, set_mean_phase, PhaseMode};
use rhythmic_core::par;
use rhythmic_core::phasenet::global_order;

fn sweep(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::TwinSweep);
    cfg.train.warmup_steps = 300;
    cfg.train.train_steps = 3000;
    cfg.twin.dwell_min = 500;
    cfg.twin.dwell_max = 900;
    let trained = train_twin(&cfg).unwrap();
    let b = &trained.bundle;
    let phi0 = global_order(&b.twin.phases).mean_phase;
    let dt = b.manifest.sim.frame_dt();
    let job = |&i: &usize| {
        let mut t = b.twin.clone();
        set_mean_phase(&mut t.phases, phi0 + std::f64::consts::TAU * i as f64 / 8.0);
        closed_loop_predict(&mut t, PhaseMode::Frozen, &b.w_out, 500, dt).map(|p| p.outputs.len()).unwrap_or(0)
    };
    let idx: Vec<usize> = (0..8).collect();
    let mut g = c.benchmark_group("frozen_phase_sweep");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("sequential", 8), |bch| bch.iter(|| par::map_seq(&idx, job)));
    g.bench_function(BenchmarkId::new(if par::is_parallel() { "rayon" } else { "fallback" }, 8), |bch| bch.iter(|| par::map(&idx, job)));
    g.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
