use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscl_core::{
    backward, build_negative_sets, l2_normalize_rows, similarity_matrix, sscl_loss_on_tape, top_k_desc, LossMode,
    LossParams, Matrix, StepKey, Tape,
};

fn unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    l2_normalize_rows(&m).unwrap()
}

fn similarity(c: &mut Criterion) {
    let mut g = c.benchmark_group("similarity_matrix");
    for two_n in [64, 256, 512] {
        let z = unit_rows(two_n, 128, 1);
        g.bench_with_input(BenchmarkId::from_parameter(two_n), &z, |b, z| {
            b.iter(|| similarity_matrix(z, z).unwrap())
        });
    }
    g.finish();
}

fn top_k(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let values: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask: Vec<bool> = (0..512).map(|i| i % 7 != 0).collect();
    c.bench_function("top_k_desc/512/32", |b| b.iter(|| top_k_desc(&values, &mask, 32).unwrap()));
}

fn loss_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("sscl_loss_forward_backward");
    g.sample_size(20);
    for mode in [LossMode::Baseline, LossMode::Sscl] {
        let z = unit_rows(256, 32, 3);
        let params = mode.effective(&LossParams { s: 16, k: 4, ..LossParams::default() });
        g.bench_function(mode.name(), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let mut ps = sscl_core::ParamSet::new();
                ps.push("z", z.clone());
                let zn = tape.param(&ps, 0);
                let sets = build_negative_sets(&z, &params, StepKey::default()).unwrap();
                let nodes = sscl_loss_on_tape(&mut tape, zn, &params, &sets).unwrap();
                backward(&tape, nodes.loss, &mut ps).unwrap();
                tape.scalar(nodes.loss)
            })
        });
    }
    g.finish();
}

criterion_group!(benches, similarity, top_k, loss_step);
criterion_main!(benches);
