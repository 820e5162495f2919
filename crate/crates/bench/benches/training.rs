use criterion::{criterion_group, criterion_main, Criterion};
use fusionet_core::experiment::ExperimentConfig;
use fusionet_core::fusion::model::Model;
use fusionet_core::fusion::train::train;
use fusionet_core::fusion::FusionMode;

fn epoch(c: &mut Criterion) {
    let cfg = ExperimentConfig::default().resolve().unwrap();
    let data = cfg.dataset(0).unwrap();
    let tc = fusionet_core::fusion::train::TrainConfig {
        max_epochs: 1,
        ..cfg.train_config(0)
    };
    let mut group = c.benchmark_group("train epoch");
    group.sample_size(10);
    for mode in FusionMode::ALL {
        group.bench_function(mode.name(), |b| {
            b.iter(|| {
                let mut model = Model::init(cfg.model_config(mode), 0).unwrap();
                train(&mut model, &data.train, &tc).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, epoch);
criterion_main!(benches);
