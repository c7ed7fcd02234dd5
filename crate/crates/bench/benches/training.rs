use criterion::{criterion_group, criterion_main, Criterion};
use ntex_core::synthetic::stripes_plus_noise;
use ntex_core::{FeatureExtractor, TrainConfig, Trainer};

fn desk_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_desk");
    group.sample_size(10);
    for dim in [2, 3] {
        let config = TrainConfig {
            target_dim: dim,
            steps: usize::MAX,
            ..TrainConfig::desk()
        };
        let corpus = vec![stripes_plus_noise(64, 1).unwrap()];
        let mut trainer = Trainer::new(config, corpus, FeatureExtractor::mini_vgg()).unwrap();
        group.bench_function(format!("{dim}d"), |b| b.iter(|| trainer.step().unwrap()));
    }
    group.finish();
}

criterion_group!(benches, desk_step);
criterion_main!(benches);
