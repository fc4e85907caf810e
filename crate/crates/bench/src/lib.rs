//! Fixtures shared by the benchmarks.

use backchain::model::{Batch, ModelConfig, Parameters};
use backchain::task::{build_dataset, encode_instance, DatasetConfig, EdgeOrder, TokenSequence};

/// Freshly initialized parameters for `n_nodes`-node trees.
pub fn params(config: ModelConfig) -> Parameters<f32> {
    Parameters::init(&config).expect("valid config")
}

pub fn sequences(n_nodes: usize, count: usize, seed: u64) -> Vec<TokenSequence> {
    build_dataset(&DatasetConfig { seed, count, n_nodes, order: EdgeOrder::Shuffled }, None)
        .expect("dataset")
        .iter()
        .map(|i| encode_instance(i).expect("encodable"))
        .collect()
}

pub fn batch(seqs: &[TokenSequence]) -> Batch {
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    Batch::from_sequences(&refs).expect("batch")
}
