//! Sequential vs data-parallel execution of the hot kernels.
//!
//! Every benchmark runs twice: on a one-thread pool (`seq`) and on a pool with
//! all cores (`par`). Build with `--no-default-features` to time the
//! rayon-free fallback itself.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use davit_core::attention::{window_attention, AttentionParams};
use davit_core::kernels::{self, ConvGeom, MatmulPlan};
use davit_core::model::{Mode, Model};
use davit_core::{par, Rng, Tape};

const MODES: [(&str, usize); 2] = [("seq", 1), ("par", 0)];

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = Rng::new(0);
    for (b, m, k, n) in [(64, 49, 96, 96), (4, 196, 384, 384)] {
        let a = rng.normal_tensor::<f32>(&[b, m, k], 1.0);
        let w = rng.normal_tensor::<f32>(&[k, n], 1.0);
        let plan = MatmulPlan::new(a.shape(), w.shape()).unwrap();
        for (mode, threads) in MODES {
            let id = BenchmarkId::new(mode, format!("{b}x{m}x{k}x{n}"));
            group.bench_function(id, |bench| {
                bench.iter(|| {
                    par::with_threads(threads, || kernels::matmul(&plan, a.data(), w.data()))
                })
            });
        }
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let mut rng = Rng::new(1);
    // patch embedding and a depthwise 3x3 position encoding
    let cases = [
        ("embed", [2, 3, 224, 224], [96, 3, 7, 7], 4, 3, 1),
        ("depthwise", [2, 96, 56, 56], [96, 1, 3, 3], 1, 1, 96),
    ];
    for (name, xs, ws, stride, pad, groups) in cases {
        let x = rng.normal_tensor::<f32>(&xs, 1.0);
        let w = rng.normal_tensor::<f32>(&ws, 0.1);
        let b = rng.normal_tensor::<f32>(&[ws[0]], 0.1);
        let geom = ConvGeom::new(&xs, &ws, stride, pad, groups).unwrap();
        for (mode, threads) in MODES {
            group.bench_function(BenchmarkId::new(mode, name), |bench| {
                bench.iter(|| {
                    par::with_threads(threads, || {
                        kernels::conv2d(&geom, x.data(), w.data(), b.data())
                    })
                })
            });
        }
    }
    group.finish();
}

fn bench_window_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("window_attention");
    let mut rng = Rng::new(2);
    let params = AttentionParams::<f32>::init(96, 3, 0.02, &mut rng).unwrap();
    let x = rng.normal_tensor::<f32>(&[1, 56, 56, 96], 1.0);
    for (mode, threads) in MODES {
        group.bench_function(BenchmarkId::new(mode, "56x56x96"), |bench| {
            bench.iter(|| {
                par::with_threads(threads, || {
                    let mut tape = Tape::new();
                    let vars = params.register(&mut tape, false);
                    let xv = tape.constant(x.clone());
                    window_attention(&mut tape, xv, &vars, 7).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    let model = Model::<f32>::preset("micro", 0).unwrap();
    let x = Rng::new(3).uniform_tensor::<f32>(&[32, 3, 32, 32], 0.0, 1.0);
    for (mode, threads) in MODES {
        group.bench_function(BenchmarkId::new(mode, "micro_b32"), |bench| {
            bench.iter(|| {
                par::with_threads(threads, || {
                    model.forward(&x, Mode::Eval, &mut Rng::new(0)).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_conv,
    bench_window_attention,
    bench_forward
);
criterion_main!(benches);
