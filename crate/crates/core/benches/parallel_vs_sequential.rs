//! Batch workloads run through both execution paths. On a single-core
//! machine the two should be within noise of each other; the parallel path
//! pays off with more cores.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use semsr::degradation::{synthesize_batch, DegradationConfig};
use semsr::metrics::{build_report, RunMeta};
use semsr::toydata::{generate_scene, SceneConfig};
use semsr::{Execution, ImageTensor};

fn scenes(n: usize, size: usize) -> Vec<ImageTensor> {
    let cfg = SceneConfig {
        size,
        ..Default::default()
    };
    (0..n as u64).map(|s| generate_scene(&cfg, s).unwrap().image).collect()
}

const PATHS: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn degradation(c: &mut Criterion) {
    let hrs = scenes(32, 64);
    let seeds: Vec<u64> = (0..32).collect();
    let cfg = DegradationConfig::default();
    let mut g = c.benchmark_group("degrade_32x64px");
    for (name, exec) in PATHS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| synthesize_batch(&hrs, &cfg, &seeds, exec).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let refs = scenes(32, 64);
    let outs: Vec<ImageTensor> = scenes(32, 64).into_iter().rev().collect();
    let ids: Vec<String> = (0..32).map(|i| i.to_string()).collect();
    let mut g = c.benchmark_group("psnr_ssim_32x64px");
    for (name, exec) in PATHS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| build_report("bench", &ids, &outs, &refs, None, &[], RunMeta::default(), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = degradation, metrics
}
criterion_main!(benches);
