use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use iars_bench::samples;
use iars_core::contour::{contour_report, efd_compute, trace_boundary, ContourConfig};
use iars_core::region::compare_masks;
use iars_core::stats::{rank_sum_test, RankSumMethod};

fn region(c: &mut Criterion) {
    let data = samples(2);
    c.bench_function("region_metrics_48x64", |b| {
        b.iter(|| black_box(compare_masks(&data[0].mask, &data[1].mask).unwrap()))
    });
}

fn contour(c: &mut Criterion) {
    let data = samples(20);
    let chain = trace_boundary(&data[0].mask).unwrap();
    c.bench_function("trace_boundary", |b| b.iter(|| black_box(trace_boundary(&data[0].mask).unwrap())));
    c.bench_function("efd_100_harmonics", |b| b.iter(|| black_box(efd_compute(&chain, 100).unwrap())));
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    let truth: Vec<_> = data.iter().map(|s| &s.mask).collect();
    let pred: Vec<_> = data.iter().map(|s| s.mask.dilate()).collect();
    let pred: Vec<_> = pred.iter().collect();
    let mut group = c.benchmark_group("contour_report_20");
    group.sample_size(10);
    for jobs in [1, 4] {
        group.bench_function(format!("jobs{jobs}"), |b| {
            b.iter(|| black_box(contour_report(&ids, &truth, &pred, &ContourConfig::default(), jobs).unwrap()))
        });
    }
    group.finish();
}

fn stats(c: &mut Criterion) {
    let x: Vec<f64> = (0..50).map(|i| (i * 7 % 13) as f64).collect();
    let y: Vec<f64> = (0..50).map(|i| (i * 5 % 11) as f64 + 0.5).collect();
    c.bench_function("rank_sum_exact_50x50", |b| {
        b.iter(|| black_box(rank_sum_test(&x, &y, RankSumMethod::Exact).unwrap()))
    });
}

criterion_group!(benches, region, contour, stats);
criterion_main!(benches);
