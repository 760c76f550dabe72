use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tppkit::ad::Graph;
use tppkit::decoders::DecoderKind;
use tppkit::encoders::EncoderKind;
use tppkit::hawkes::{simulate_dataset, Preset};
use tppkit::likelihood::{sequence_loglik, weighted_roc_auc, SequenceModel};
use tppkit::nn::ForwardCtx;
use tppkit::Task;
use tppkit_bench::{hawkes_sequences, model};

fn loglik_and_gradient(c: &mut Criterion) {
    let seq = hawkes_sequences(1, 7).remove(0);
    let mut group = c.benchmark_group("loglik_backward");
    for enc in [EncoderKind::Gru, EncoderKind::Sa] {
        for dec in DecoderKind::ALL {
            let (m, store) = model(enc, dec, 8);
            let id = BenchmarkId::new(format!("{enc:?}"), dec.name());
            group.bench_function(id, |b| {
                b.iter(|| {
                    let mut g = Graph::new();
                    let mut ctx = ForwardCtx::train(1, 10);
                    let terms = m.interval_terms(&mut g, &store, &mut ctx, &seq).unwrap();
                    let ll = sequence_loglik(&mut g, &terms, &seq, Task::MultiClass).unwrap();
                    g.backward(ll).unwrap()
                })
            });
        }
    }
    group.finish();
}

fn hawkes_simulation(c: &mut Criterion) {
    let params = Preset::Dependent.params();
    c.bench_function("simulate_hawkes_64x100", |b| {
        b.iter(|| simulate_dataset(&params, 64, [0.0, 100.0], 3).unwrap())
    });
}

fn roc_auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scores: Vec<Vec<f64>> = (0..10_000).map(|_| (0..8).map(|_| rng.random()).collect()).collect();
    let truth: Vec<Vec<bool>> = (0..10_000).map(|_| (0..8).map(|_| rng.random_bool(0.3)).collect()).collect();
    c.bench_function("weighted_roc_auc_10k_x8", |b| b.iter(|| weighted_roc_auc(&scores, &truth).unwrap()));
}

criterion_group!(benches, loglik_and_gradient, hawkes_simulation, roc_auc);
criterion_main!(benches);
