use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use kernel_surrogate::kernel::kernel_matrix_with;
use kernel_surrogate::par::Execution;
use kernel_surrogate::selection::{
    k_fold_cv, log_grid, Method, ParameterGrid, SelectionOptions, Trainer,
};
use kernel_surrogate::vkoga::SelectionRule;
use kernel_surrogate::{synthetic, KernelFamily, KernelSpec};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn kernel_matrix(c: &mut Criterion) {
    let data = synthetic::BumpMap::new(1, 20).sample(800, 1);
    let spec = KernelSpec::gaussian(1.0).unwrap();
    let mut group = c.benchmark_group("kernel_matrix_800");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                kernel_matrix_with(exec, &spec, black_box(&data.inputs), &data.inputs).unwrap()
            })
        });
    }
    group.finish();
}

fn grid_sweep(c: &mut Criterion) {
    let data = synthetic::BumpMap::new(1, 20).sample(200, 1);
    let grid = ParameterGrid {
        gamma: log_grid(0.1, 10.0, 4).unwrap(),
        lambda: log_grid(1e-10, 1e-2, 3).unwrap(),
        epsilon: None,
    };
    let mut trainer = Trainer::new(
        Method::Vkoga {
            rule: SelectionRule::FGreedy,
        },
        KernelFamily::Gaussian,
    );
    trainer.max_points = 60;
    let mut group = c.benchmark_group("vkoga_cv_4x3x5");
    group.sample_size(10);
    for (name, exec) in MODES {
        let options = SelectionOptions {
            timings: false,
            exec,
            ..SelectionOptions::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| k_fold_cv(&grid, &trainer, black_box(&data), None, 5, &options).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernel_matrix, grid_sweep);
criterion_main!(benches);
