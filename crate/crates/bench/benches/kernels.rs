use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use nadlab::autodiff::Layer;
use nadlab::models::{Model, ModelSpec, Pooling};
use nadlab::rng::Rng;
use nadlab::spectral;
use nadlab::tensor::Tensor;

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for &(cin, cout, hw) in &[(1usize, 8usize, 32usize), (8, 16, 16)] {
        let layer = Layer::Conv2d { cin, cout, h: hw, w: hw, k: 3 };
        let mut rng = Rng::new(1, 0);
        let p = gaussian(&mut rng, layer.n_params());
        let x = gaussian(&mut rng, layer.in_len());
        let gy = gaussian(&mut rng, layer.out_len());
        let id = format!("{cin}x{hw}x{hw}->{cout}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| black_box(layer.forward::<f64>(&p, &x)))
        });
        g.bench_with_input(BenchmarkId::new("backward", &id), &(), |b, _| {
            let mut gp = vec![0.0; p.len()];
            b.iter(|| black_box(layer.backward::<f64>(&p, &x, &gy, Some(&mut gp), true)))
        });
    }
    g.finish();
}

fn dft(c: &mut Criterion) {
    let mut rng = Rng::new(2, 0);
    let x = Tensor::new(vec![32, 32], gaussian(&mut rng, 1024)).unwrap();
    c.bench_function("dft2 32x32", |b| b.iter(|| black_box(spectral::dft2(&x).unwrap())));
}

fn gradients(c: &mut Criterion) {
    let model = Model::new(ModelSpec::mini_cnn(1, 32, 32, Pooling::Avg, 1)).unwrap();
    let params = model.init_params(&mut Rng::new(3, 0));
    let x = vec![0.0; 1024];
    let mut g = c.benchmark_group("input gradient minicnn 32x32");
    g.sample_size(20);
    g.bench_function("reverse mode", |b| b.iter(|| black_box(model.grad_input(&params, &x).unwrap())));
    g.bench_function("finite differences h=100", |b| {
        b.iter(|| black_box(model.finite_diff_grad_input(&params, &x, 100.0).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, conv, dft, gradients);
criterion_main!(benches);
