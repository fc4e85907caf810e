use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{choose_goal_and_path, sample_tree, shuffle_edges, EdgeOrder, NodeId, TaskInstance, Tree};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// One JSONL line. Edges are listed in presentation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub seed: u64,
    pub edges: Vec<(NodeId, NodeId)>,
    pub root: NodeId,
    pub goal: NodeId,
    pub path: Vec<NodeId>,
}

impl From<&TaskInstance> for InstanceRecord {
    fn from(inst: &TaskInstance) -> Self {
        InstanceRecord {
            seed: inst.seed,
            edges: inst.edge_order.clone(),
            root: inst.root(),
            goal: inst.goal,
            path: inst.path.clone(),
        }
    }
}

impl TryFrom<InstanceRecord> for TaskInstance {
    type Error = Error;
    fn try_from(r: InstanceRecord) -> Result<Self> {
        let tree = Tree::from_edges(r.edges.len() + 1, &r.edges)?;
        if tree.root() != r.root {
            return Err(Error::invalid(format!(
                "record root {} disagrees with edges (root {})",
                r.root,
                tree.root()
            )));
        }
        let inst = TaskInstance {
            tree,
            goal: r.goal,
            path: r.path,
            edge_order: r.edges,
            seed: r.seed,
        };
        inst.validate()?;
        Ok(inst)
    }
}

/// Identity of a labeled tree: its sorted edge set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TreeKey(Vec<(u8, u8)>);

impl TreeKey {
    pub fn of(tree: &Tree) -> Self {
        TreeKey(tree.edges().into_iter().map(|(a, b)| (a as u8, b as u8)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    pub n_nodes: usize,
    pub order: EdgeOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub order: EdgeOrder,
    pub n_nodes: usize,
    pub schema_version: u32,
}

/// SplitMix64 over `base + index`; gives each instance an independent seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds one instance entirely from its own seed.
pub fn generate_instance(seed: u64, n_nodes: usize, order: EdgeOrder) -> Result<TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = sample_tree(&mut rng, n_nodes)?;
    let (goal, path) = choose_goal_and_path(&mut rng, &tree)?;
    let edge_order = shuffle_edges(&mut rng, &tree, order);
    Ok(TaskInstance {
        tree,
        goal,
        path,
        edge_order,
        seed,
    })
}

/// Generates `count` instances. Trees whose identity appears in `exclude`
/// are redrawn from a follow-up seed, so a held-out split never repeats a
/// training tree.
pub fn build_dataset(config: &DatasetConfig, exclude: Option<&HashSet<TreeKey>>) -> Result<Vec<TaskInstance>> {
    if config.count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let mut out = Vec::with_capacity(config.count);
    for i in 0..config.count as u64 {
        let mut attempt = 0u64;
        loop {
            let seed = derive_seed(derive_seed(config.seed, i), attempt);
            let inst = generate_instance(seed, config.n_nodes, config.order)?;
            let clash = exclude.is_some_and(|ex| ex.contains(&TreeKey::of(&inst.tree)));
            if !clash {
                out.push(inst);
                break;
            }
            attempt += 1;
            if attempt > 1_000_000 {
                return Err(Error::Internal("could not avoid excluded trees".into()));
            }
        }
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut w, &InstanceRecord::from(inst))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line)?;
        let inst = TaskInstance::try_from(rec)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, config: &DatasetConfig) -> Result<()> {
    let m = DatasetManifest {
        seed: config.seed,
        count: config.count,
        order: config.order,
        n_nodes: config.n_nodes,
        schema_version: SCHEMA_VERSION,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
