use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msaf::analyzer::count_msaf;
use msaf::experiment::ExperimentConfig;
use msaf::msaf::{init_msaf, msaf_forward};
use msaf::seq::seq_msaf_forward;
use msaf::synth::generate_dataset;
use msaf::train::train;
use msaf::zoo::build_fusion_network;
use msaf::{AxisSpec, ModalityFeature, Mode, MsafConfig, Tensor};

fn features(shapes: &[[usize; 3]], axes: AxisSpec, rng: &mut ChaCha8Rng) -> Vec<ModalityFeature> {
    shapes
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let t = Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0));
            ModalityFeature::new(t, axes.clone(), m).unwrap()
        })
        .collect()
}

fn bench_msaf(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let config = MsafConfig::new(32, 4);
    let params = init_msaf(&[64, 64], &config, &mut rng).unwrap();
    let x = features(&[[4, 64, 32], [4, 64, 32]], AxisSpec::channels_first(1), &mut rng);
    c.bench_function("msaf_forward/64x64/b4", |b| {
        b.iter(|| msaf_forward(black_box(&x), &params, &config, Mode::Eval, &mut rng).unwrap())
    });
}

fn bench_seq(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let config = MsafConfig::new(16, 4).with_segments(4);
    let params: Vec<_> = (0..4)
        .map(|_| init_msaf(&[32, 32], &config, &mut rng).unwrap())
        .collect();
    let x = features(&[[64, 4, 32], [64, 4, 32]], AxisSpec::sequence_major(), &mut rng);
    c.bench_function("seq_msaf_forward/q4/t64", |b| {
        b.iter(|| seq_msaf_forward(black_box(&x), &params, &config, Mode::Eval, &mut rng).unwrap())
    });
}

fn bench_counts(c: &mut Criterion) {
    let config = MsafConfig::new(512, 4);
    c.bench_function("count_msaf/1024x1024", |b| {
        b.iter(|| count_msaf(black_box(&[1024, 1024]), &config, 4).unwrap())
    });
}

const TRAIN_CONFIG: &str = r#"{
  "task": {"kind": "complementary_classification", "channels": [4, 4], "extent": 8, "classes": 4,
           "split": [[0, 1], [2, 3]], "sigma": 1.5, "n_train": 64, "n_val": 16, "n_test": 16, "seed": 3},
  "methods": [{"name": "msaf", "network": {"encoders": [
      {"kind": "conv1d", "in_channels": 4, "widths": [8, 8], "kernels": [3, 3]},
      {"kind": "conv1d", "in_channels": 4, "widths": [8, 8], "kernels": [3, 3]}],
    "placements": [{"taps": [{"encoder": 0, "layer": 0}, {"encoder": 1, "layer": 0}],
                    "msaf": {"block_channels": 4, "reduction": 2}}],
    "head": {"kind": "sum_logits"}, "outputs": 4, "task": "classification"}}],
  "train": {"optimizer": {"kind": "adam", "lr": 0.01}, "loss": "cross_entropy", "epochs": 1, "batch": 16},
  "seeds": [1]
}"#;

fn bench_train(c: &mut Criterion) {
    let cfg = ExperimentConfig::from_json(TRAIN_CONFIG).unwrap();
    let data = generate_dataset(&cfg.task).unwrap();
    let spec = &cfg.methods[0].network;
    c.bench_function("train_epoch/64_samples", |b| {
        b.iter_batched(
            || build_fusion_network(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(),
            |mut net| train(&mut net, &data.train, &data.val, &cfg.train, 1).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_msaf, bench_seq, bench_counts, bench_train
}
criterion_main!(benches);
