use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use polyseq::datagen::{generate, GenConfig};
use polyseq::geometry::{convex_iou, raster_iou, Point2, Polygon};
use polyseq::grad::{gemm, ConvSpec, Graph, Tensor};
use polyseq::matching::hungarian;
use polyseq::Task;
use polyseq_bench::cost_matrix;

fn bench_hungarian(c: &mut Criterion) {
    let mut g = c.benchmark_group("hungarian");
    for n in [4, 12, 30, 100] {
        let m = cost_matrix(n, n as u64);
        g.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| b.iter(|| hungarian(black_box(m)).unwrap()));
    }
    g.finish();
}

fn square(x: f64, y: f64, s: f64) -> Polygon {
    Polygon::new(vec![Point2::new(x, y), Point2::new(x + s, y), Point2::new(x + s, y + s), Point2::new(x, y + s)]).unwrap()
}

fn bench_iou(c: &mut Criterion) {
    let (a, b) = (square(0.1, 0.1, 0.5), square(0.3, 0.2, 0.5));
    c.bench_function("iou/convex_clip", |bn| bn.iter(|| convex_iou(black_box(&a), black_box(&b)).unwrap()));
    c.bench_function("iou/raster_2048", |bn| bn.iter(|| raster_iou(black_box(&a), black_box(&b), 2048).unwrap()));
}

fn bench_datagen(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_256");
    for task in Task::ALL {
        let cfg = GenConfig { task, ..GenConfig::default() };
        g.bench_function(task.as_str(), |b| b.iter(|| generate(black_box(&cfg), 7).unwrap()));
    }
    g.finish();
}

fn bench_gemm(c: &mut Criterion) {
    let n = 128;
    let a = vec![0.5f32; n * n];
    let bm = vec![0.25f32; n * n];
    let mut out = vec![0.0f32; n * n];
    c.bench_function("gemm_f32_128", |b| b.iter(|| gemm(n, n, n, black_box(&a), false, black_box(&bm), false, &mut out, false)));
}

fn bench_conv(c: &mut Criterion) {
    c.bench_function("conv2d_fwd_bwd_8x16x32x32", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::full(&[8, 16, 32, 32], 0.1), true);
            let w = g.leaf(Tensor::full(&[32, 16, 3, 3], 0.01), true);
            let bias = g.leaf(Tensor::zeros(&[32]), true);
            let y = g.conv2d(x, w, bias, ConvSpec { stride: 2, padding: 1 }).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
        })
    });
}

criterion_group!(benches, bench_hungarian, bench_iou, bench_datagen, bench_gemm, bench_conv);
criterion_main!(benches);
