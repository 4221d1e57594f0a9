use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sketchgen::autodiff::{Tape, Tensor};
use sketchgen::retrieval::score_candidates;
use sketchgen_bench::{database, desk_trainer, rng};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_forward_backward");
    for n in [32usize, 128, 256] {
        let mut r = rng(0);
        let a = Tensor::randn(&[64, n], &mut r);
        let b = Tensor::randn(&[n, n], &mut r);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let va = tape.param(a.clone());
                let vb = tape.param(b.clone());
                let y = tape.matmul(va, vb).unwrap();
                let s = tape.sum(y, None).unwrap();
                tape.backward(s).unwrap();
                tape.grad(vb).map(|g| g.data()[0])
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let (mut trainer, x, a) = desk_trainer(64);
    c.bench_function("train_step_desk_batch64", |b| {
        b.iter(|| trainer.train_step(&x, &a, 1e-5).unwrap().losses.total_generator)
    });
}

fn score_query(c: &mut Criterion) {
    let db = database(1000, 32, 5);
    let mut r = rng(3);
    let cands: Vec<Vec<f64>> = (0..10).map(|_| Tensor::randn(&[1, 32], &mut r).data().to_vec()).collect();
    c.bench_function("score_10_candidates_1000_images", |b| b.iter(|| score_candidates(&cands, &db)));
}

criterion_group!(benches, matmul, train_step, score_query);
criterion_main!(benches);
