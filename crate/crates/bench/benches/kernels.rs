use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use densesr::data::{bicubic_upsample, nn_downsample};
use densesr::metrics::psnr;
use densesr::{Graph, Shape};
use densesr_bench::ramp_tensor;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (ch, side) in [(16, 64), (64, 32)] {
        let x = ramp_tensor(Shape::new(4, ch, side, side), 1);
        let k = ramp_tensor(Shape::new(ch, ch, 3, 3), 2).map(|v| v - 0.5);
        let id = format!("{ch}ch_{side}px");
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
                g.conv2d(xv, kv, None, 1, 1).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", &id), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xv, kv) = (g.input(x.clone()), g.param("k", k.clone()));
                let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
                let l = g.mean_all(y);
                g.backward(l).unwrap()
            })
        });
    }
    group.finish();

    let x = ramp_tensor(Shape::new(4, 32, 32, 32), 3);
    let k = ramp_tensor(Shape::new(32, 32, 3, 3), 4).map(|v| v - 0.5);
    c.bench_function("conv_transpose2d_s2_32ch_32px", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            g.conv_transpose2d(xv, kv, None, 2, 1, 1).unwrap()
        })
    });
}

fn image_ops(c: &mut Criterion) {
    let hr = ramp_tensor(Shape::new(1, 3, 256, 256), 5);
    let lr = nn_downsample(&hr, 4).unwrap();
    c.bench_function("bicubic_upsample_64_to_256", |b| {
        b.iter(|| bicubic_upsample(&lr, 4).unwrap())
    });
    let other = ramp_tensor(Shape::new(1, 3, 256, 256), 6);
    c.bench_function("psnr_256px_rgb", |b| b.iter(|| psnr(&hr, &other).unwrap()));
}

criterion_group!(benches, conv, image_ops);
criterion_main!(benches);
