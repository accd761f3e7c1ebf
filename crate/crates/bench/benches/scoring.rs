use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use pet_bench::Fixture;
use pet_core::pipeline::{ensemble_soft_label, TaskContext};
use pet_core::training::finetune;
use pet_core::{DecodingStrategy, PvpScorer, TabularMlm, ToyKind, TrainConfig};

fn decoding(c: &mut Criterion) {
    let fx = Fixture::new(ToyKind::SpanChoice);
    let spec = fx.task.spec();
    let scorer = PvpScorer::new(&fx.pvps[0], &fx.task.vocab, spec.num_labels(), 32);
    let xs = fx.examples(16);
    let tabular = TabularMlm::new(fx.task.vocab.len(), 32, 3);
    let mut g = c.benchmark_group("multi_token_decoding");
    for s in DecodingStrategy::ALL {
        g.bench_with_input(BenchmarkId::new("transformer", s), &s, |b, &s| {
            b.iter(|| {
                for x in xs {
                    black_box(scorer.score_multi_token(&fx.model, x, s).unwrap());
                }
            })
        });
        g.bench_with_input(BenchmarkId::new("tabular", s), &s, |b, &s| {
            b.iter(|| {
                for x in xs {
                    black_box(scorer.score_multi_token(&tabular, x, s).unwrap());
                }
            })
        });
    }
    g.bench_function("training_approximation", |b| {
        b.iter(|| {
            for x in xs {
                black_box(scorer.score_parallel_training(&fx.model, x).unwrap());
            }
        })
    });
    g.finish();
}

fn single_token(c: &mut Criterion) {
    let fx = Fixture::new(ToyKind::Sentiment);
    let scorer = PvpScorer::new(&fx.pvps[0], &fx.task.vocab, 2, 32);
    let xs = fx.examples(16);
    c.bench_function("single_token_scoring", |b| {
        b.iter(|| {
            for x in xs {
                black_box(scorer.score_single_token(&fx.model, x).unwrap());
            }
        })
    });
}

fn soft_labeling(c: &mut Criterion) {
    let fx = Fixture::new(ToyKind::Sentiment);
    let ctx = TaskContext::new(fx.task.spec(), &fx.task.vocab, &fx.pvps, 32);
    let members = fx.members();
    let xs = fx.examples(64);
    c.bench_function("ensemble_soft_label_64", |b| {
        b.iter(|| {
            black_box(
                ensemble_soft_label(&members, &ctx, xs, DecodingStrategy::MaxFirst, 1).unwrap(),
            )
        })
    });
}

fn finetuning(c: &mut Criterion) {
    let fx = Fixture::new(ToyKind::Sentiment);
    let train = &fx.task.train.examples[..32];
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        gradient_accumulation_steps: 1,
        max_steps: 5,
        ..TrainConfig::default()
    };
    c.bench_function("finetune_5_steps_batch_4", |b| {
        b.iter(|| {
            black_box(
                finetune(
                    fx.model.clone(),
                    &fx.pvps[0],
                    &fx.task.vocab,
                    fx.task.spec(),
                    train,
                    &cfg,
                    None,
                )
                .unwrap(),
            )
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = decoding, single_token, soft_labeling, finetuning
}
criterion_main!(benches);
