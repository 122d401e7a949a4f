use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mobiswarm::config::Config;
use mobiswarm::engine::RunOptions;
use mobiswarm::experiment::{default_jobs, run_batch, Execution};
use mobiswarm::hybrid::Mode;

fn small_sweep() -> (Config, Vec<(Mode, u64)>) {
    let mut cfg = Config::default();
    cfg.scenario.num_peers = 40;
    cfg.scenario.num_seeders = 4;
    cfg.scenario.sim_duration_s = 600.0;
    cfg.file.file_size = 1024 * 1024;
    let runs = (1..=4)
        .flat_map(|s| [(Mode::Baseline, s), (Mode::Hybrid, s)])
        .collect();
    (cfg, runs)
}

fn sweep(c: &mut Criterion) {
    let (cfg, runs) = small_sweep();
    let jobs = default_jobs(runs.len()).max(2);
    let mut group = c.benchmark_group("sweep_8_runs");
    group.sample_size(10);
    for (name, exec) in [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel(jobs)),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_batch(&cfg, &runs, exec, RunOptions::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
