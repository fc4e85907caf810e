use backchain::interp::{causal_scrub, ScrubHypothesis};
use backchain::model::{forward_batch, loss_and_grad, ModelConfig};
use backchain::task::{build_dataset, DatasetConfig, EdgeOrder};
use backchain_bench::{batch, params, sequences};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

fn forward_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    for (name, cfg, n_nodes) in [("reduced", ModelConfig::reduced(), 8), ("paper", ModelConfig::default(), 16)] {
        let p = params(cfg);
        let seqs = sequences(n_nodes, 64, 1);
        let tokens: Vec<&[u32]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        g.bench_function(format!("forward/{name}/b64"), |b| {
            b.iter(|| forward_batch(&p, black_box(&tokens), None).unwrap())
        });
        let bt = batch(&seqs);
        g.bench_function(format!("loss_and_grad/{name}/b64"), |b| b.iter(|| loss_and_grad(&p, black_box(&bt)).unwrap()));
    }
    g.finish();
}

fn scrubbing(c: &mut Criterion) {
    let p = params(ModelConfig::reduced());
    let data = build_dataset(&DatasetConfig { seed: 2, count: 32, n_nodes: 8, order: EdgeOrder::Shuffled }, None).unwrap();
    let mut g = c.benchmark_group("interp");
    g.sample_size(10);
    g.bench_function("causal_scrub/reduced/32", |b| {
        b.iter_batched(ScrubHypothesis::default, |h| causal_scrub(&p, &data, &h).unwrap(), BatchSize::SmallInput)
    });
    g.finish();
}

criterion_group!(benches, forward_backward, scrubbing);
criterion_main!(benches);
