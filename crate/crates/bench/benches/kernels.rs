use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use fbvt_bench::{lifted_points, refine_workload, spec, CHANNELS};
use fbvt_core::io::reference_rig;
use fbvt_core::{refine, splat_naive, splat_pooled, BackwardConfig};

const SIZES: [usize; 3] = [128, 256, 400];

fn splat(c: &mut Criterion) {
    let points = lifted_points(&reference_rig(), CHANNELS);
    let mut group = c.benchmark_group("splat");
    group.sample_size(20);
    group.throughput(Throughput::Elements(points.len() as u64));
    for size in SIZES {
        let s = spec(size, CHANNELS);
        assert_eq!(
            splat_naive(&points, &s).unwrap(),
            splat_pooled(&points, &s).unwrap()
        );
        group.bench_with_input(BenchmarkId::new("naive", size), &s, |b, s| {
            b.iter(|| splat_naive(&points, s).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("pooled", size), &s, |b, s| {
            b.iter(|| splat_pooled(&points, s).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("refine");
    group.sample_size(20);
    let config = BackwardConfig::default();
    for size in SIZES {
        let w = refine_workload(size, 6, 3);
        group.throughput(Throughput::Elements(w.queries.len() as u64));
        group.bench_function(BenchmarkId::from_parameter(size), |b| {
            b.iter(|| {
                refine(
                    &w.bev,
                    &w.queries,
                    w.scene.rig(),
                    &w.inputs.features,
                    &w.inputs.depths,
                    &w.params,
                    &config,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, splat, backward);
criterion_main!(benches);
