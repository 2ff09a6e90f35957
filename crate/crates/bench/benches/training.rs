use criterion::{criterion_group, criterion_main, Criterion};

use polyseq::model::{DecodeMode, Model, ModelConfig, Sample, TrainConfig, Trainer};
use polyseq::Task;
use polyseq_bench::samples;

fn bench_train_step(c: &mut Criterion) {
    let data = samples(Task::Gates, 8);
    let batch: Vec<&Sample> = data.iter().collect();
    let mut g = c.benchmark_group("train_step_desk_b8");
    g.sample_size(20);
    for mode in [DecodeMode::Parallel, DecodeMode::Autoregressive] {
        let model = Model::<f32>::new(ModelConfig::desk(Task::Gates, mode), 0).unwrap();
        let mut trainer = Trainer::new(model, TrainConfig::default());
        g.bench_function(mode.as_str(), |b| b.iter(|| trainer.train_step(&batch).unwrap()));
    }
    g.finish();
}

fn bench_predict(c: &mut Criterion) {
    let data = samples(Task::Gates, 8);
    let images: Vec<&[f64]> = data.iter().map(|s| s.image.as_slice()).collect();
    let mut g = c.benchmark_group("predict_desk_b8");
    g.sample_size(20);
    for mode in [DecodeMode::Parallel, DecodeMode::Autoregressive] {
        let model = Model::<f32>::new(ModelConfig::desk(Task::Gates, mode), 0).unwrap();
        g.bench_function(mode.as_str(), |b| b.iter(|| model.predict(&images).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_train_step, bench_predict);
criterion_main!(benches);
