use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use searnn::policy::{roll_in, PolicyKind};
use searnn::searnn::{build_targets, compute_cost_vector, Sampling, SearnnConfig};
use searnn::{ModelDims, Seq2Seq, TokenId, BOS, EOS};

fn model(hidden: usize, vocab: usize) -> Seq2Seq {
    let dims = ModelDims {
        src_vocab: vocab,
        tgt_vocab: vocab,
        embed_dim: 32,
        hidden_dim: hidden,
    };
    Seq2Seq::new(dims, 7).unwrap()
}

fn sentence(vocab: usize, len: usize, salt: usize) -> Vec<TokenId> {
    let mut s = vec![BOS];
    s.extend((0..len).map(|i| (4 + (i * 7 + salt * 3) % (vocab - 4)) as TokenId));
    s.push(EOS);
    s
}

fn decode_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode_step");
    for hidden in [64, 128, 256] {
        let m = model(hidden, 1000);
        let enc = m.encode(&sentence(1000, 10, 1)).unwrap();
        let state = m.init_decoder(&enc);
        group.bench_with_input(BenchmarkId::from_parameter(hidden), &hidden, |b, _| {
            b.iter(|| m.decode_step(black_box(&state), 17).unwrap())
        });
    }
    group.finish();
}

fn cost_vector(c: &mut Criterion) {
    let m = model(64, 200);
    let src = sentence(200, 10, 1);
    let tgt = sentence(200, 10, 2);
    let traj = roll_in(&m, &src, &tgt, PolicyKind::Reference, 0).unwrap();
    let candidates: Vec<TokenId> = (0..25).collect();
    let mut group = c.benchmark_group("cost_vector");
    for (name, policy) in [
        ("reference", PolicyKind::Reference),
        ("mixed", PolicyKind::Mixed(0.5)),
        ("learned", PolicyKind::Learned),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| compute_cost_vector(&m, &traj, 3, black_box(&candidates), policy, 50, 1).unwrap())
        });
    }
    group.finish();
}

fn targets(c: &mut Criterion) {
    let m = model(64, 200);
    let src = sentence(200, 10, 1);
    let tgt = sentence(200, 10, 2);
    let mut group = c.benchmark_group("build_targets");
    group.sample_size(20);
    let sampled = SearnnConfig::default();
    let full = SearnnConfig {
        sampling: Sampling::Full,
        ..SearnnConfig::default()
    };
    group.bench_function("sampled_25", |b| b.iter(|| build_targets(&m, &src, &tgt, &sampled, 3).unwrap()));
    group.bench_function("full_vocab", |b| b.iter(|| build_targets(&m, &src, &tgt, &full, 3).unwrap()));
    group.finish();
}

criterion_group!(benches, decode_step, cost_vector, targets);
criterion_main!(benches);
