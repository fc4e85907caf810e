//! The synthetic pathfinding task: trees, instances, token layout, datasets.

mod dataset;
mod encoding;
mod tree;
mod vocab;

pub use dataset::{
    build_dataset, derive_seed, generate_instance, read_jsonl, read_manifest, write_jsonl,
    write_manifest, DatasetConfig, DatasetManifest, InstanceRecord, TreeKey, SCHEMA_VERSION,
};
pub use encoding::{decode_tokens, encode_instance, Layout, Region, TokenSequence};
pub use tree::{
    choose_goal_and_path, sample_ordered_shape, sample_tree, shuffle_edges, EdgeOrder, NodeId,
    OrderedShape, Tree,
};
pub use vocab::{Token, Vocabulary, MAX_NODES};

use serde::{Deserialize, Serialize};

/// One training example: a tree, its goal leaf, the root-to-goal path, and
/// the order in which the edges are presented to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub tree: Tree,
    pub goal: NodeId,
    pub path: Vec<NodeId>,
    pub edge_order: Vec<(NodeId, NodeId)>,
    pub seed: u64,
}

impl TaskInstance {
    pub fn n_nodes(&self) -> usize {
        self.tree.n_nodes()
    }

    pub fn root(&self) -> NodeId {
        self.tree.root()
    }

    /// Number of edges between root and goal.
    pub fn path_len(&self) -> usize {
        self.path.len().saturating_sub(1)
    }

    /// Checks every instance invariant; used when reading untrusted files.
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        let tree = &self.tree;
        if self.goal >= tree.n_nodes() {
            return Err(Error::invalid(format!("goal {} out of range", self.goal)));
        }
        if self.goal == tree.root() || !tree.is_leaf(self.goal) {
            return Err(Error::invalid(format!("goal {} is not a non-root leaf", self.goal)));
        }
        if self.path.first() != Some(&tree.root()) || self.path.last() != Some(&self.goal) {
            return Err(Error::invalid("path must run from root to goal"));
        }
        for w in self.path.windows(2) {
            if tree.parent(w[1]) != Some(w[0]) {
                return Err(Error::invalid(format!("({}, {}) is not an edge", w[0], w[1])));
            }
        }
        let mut listed: Vec<_> = self.edge_order.clone();
        listed.sort_unstable();
        if listed != tree.edges() {
            return Err(Error::invalid("edge_order is not a permutation of the tree's edges"));
        }
        Ok(())
    }
}
