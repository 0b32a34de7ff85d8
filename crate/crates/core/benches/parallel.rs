use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nfad_core::dataeval::{density_grid, GridBounds, GridSpace};
use nfad_core::flows::FlowSpec;
use nfad_core::ndmath::{sample_std_normal, RngState};
use nfad_core::par;

fn flow() -> nfad_core::flows::FlowStack {
    let mut rng = RngState::new(7);
    let mut s = FlowSpec::default().build(2, &mut rng).unwrap();
    s.perturb_params(0.05, &mut rng);
    s
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_log_prob(c: &mut Criterion) {
    let stack = flow();
    let x = sample_std_normal(4096, 2, &mut RngState::new(1));
    let mut g = c.benchmark_group("log_prob_4096");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| stack.log_prob(&x).unwrap());
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn bench_density_grid(c: &mut Criterion) {
    let stack = flow();
    let mut g = c.benchmark_group("density_grid_64x64");
    g.sample_size(20);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| density_grid(&stack, GridBounds::square(3.0), 64, 64, GridSpace::Data).unwrap());
        });
    }
    par::set_sequential(false);
    g.finish();
}

criterion_group!(benches, bench_log_prob, bench_density_grid);
criterion_main!(benches);
