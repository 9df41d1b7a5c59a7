use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use iskg_core::corpus::{generate_synthetic, split, LabeledSentence, SplitRatio, SynthGrammar};
use iskg_core::decoder;
use iskg_core::model::LossKind;
use iskg_core::parallel::{map_collect, Execution};
use iskg_core::trainer::{batch_gradients, evaluate, init_model, TrainConfig};
use iskg_numerics::{Rng, Tensor};

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn bench_model(c: &mut Criterion) {
    let corpus = generate_synthetic(&SynthGrammar::default_hazop(1), 64);
    let ds = split(&corpus.dataset, SplitRatio::default(), 1).unwrap();
    let cfg = TrainConfig::default();
    let model = init_model(&ds, &cfg).unwrap();
    let batch: Vec<&LabeledSentence> = ds.sentences.iter().collect();

    let mut g = c.benchmark_group("batch_gradients_64");
    g.sample_size(10);
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                batch_gradients(&model, &batch, LossKind::Il, |i| Rng::derive(3, &[i as u64]), exec).unwrap()
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_64");
    g.sample_size(10);
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, &batch, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_crf(c: &mut Criterion) {
    let mut rng = Rng::new(5);
    let instances: Vec<(Tensor, Tensor)> = (0..512)
        .map(|_| {
            let e = Tensor::new(vec![24, 9], (0..24 * 9).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
            let t = Tensor::new(vec![11, 11], (0..121).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
            (e, t)
        })
        .collect();
    let mut g = c.benchmark_group("crf_partition_and_viterbi_512");
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                map_collect(exec, &instances, |_, (e, t)| {
                    (decoder::log_partition(e, t), decoder::viterbi(e, t))
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_model, bench_crf);
criterion_main!(benches);
