use apl_core::evaluation::{embed_records, hungarian_match, ConfusionMatrix};
use apl_core::features::{split_gcd, synth_generate};
use apl_core::training::{make_batch, train_step};
use apl_core::{ModelState, SynthSpec, TrainConfig};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in [7usize, 64] {
        let mut cm = ConfusionMatrix::zeros(k);
        for i in 0..k {
            for j in 0..k {
                cm.add(i, j, rng.random_range(0..50));
            }
        }
        c.bench_function(&format!("hungarian_k{k}"), |b| {
            b.iter(|| hungarian_match(black_box(&cm)))
        });
    }
}

fn training(c: &mut Criterion) {
    let spec = SynthSpec::default();
    let (ds, _) = synth_generate(&spec).unwrap();
    let cfg = TrainConfig::default();
    let split = split_gcd(&ds, cfg.labeled_fraction).unwrap();
    let mut state = ModelState::init(&cfg, spec.dim, ds.class_count);
    let batch = make_batch(&split.labeled, &split.unlabeled, &cfg, &mut state.rng).unwrap();
    c.bench_function("train_step_b16", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| train_step(&mut s, &batch, &cfg, 1000).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let records = &ds.records[..40];
    c.bench_function("discover_parts_40", |b| {
        b.iter(|| embed_records(&state, black_box(records), &cfg).unwrap())
    });
}

criterion_group!(benches, matching, training);
criterion_main!(benches);
