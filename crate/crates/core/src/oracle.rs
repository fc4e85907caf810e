//! Exact symbolic ground truth: paths, ancestors, counting, and an
//! executable backward-chaining reference model.

use std::collections::VecDeque;

use num_bigint::BigUint;
use num_traits::One;

use crate::task::{NodeId, TaskInstance, Tree};

/// The unique simple path from `a` to `b`, found through the lowest common
/// ancestor of their parent chains.
pub fn unique_path(tree: &Tree, a: NodeId, b: NodeId) -> Vec<NodeId> {
    let up_a = ancestors_inclusive(tree, a);
    let up_b = ancestors_inclusive(tree, b);
    let on_b: std::collections::HashSet<_> = up_b.iter().copied().collect();
    let lca_idx_a = up_a.iter().position(|v| on_b.contains(v)).expect("tree is connected");
    let lca = up_a[lca_idx_a];
    let lca_idx_b = up_b.iter().position(|&v| v == lca).unwrap();
    let mut path: Vec<NodeId> = up_a[..=lca_idx_a].to_vec();
    path.extend(up_b[..lca_idx_b].iter().rev());
    path
}

/// `node`, its parent, grandparent, ... up to the root.
fn ancestors_inclusive(tree: &Tree, node: NodeId) -> Vec<NodeId> {
    let mut out = vec![node];
    let mut v = node;
    while let Some(p) = tree.parent(v) {
        out.push(p);
        v = p;
    }
    out
}

/// Breadth-first search over the undirected tree; an independent check on
/// [`unique_path`] and on generated paths.
pub fn bfs_path(tree: &Tree, a: NodeId, b: NodeId) -> Vec<NodeId> {
    let n = tree.n_nodes();
    let mut prev = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([a]);
    seen[a] = true;
    while let Some(v) = queue.pop_front() {
        if v == b {
            break;
        }
        let nbrs = tree.children(v).iter().copied().chain(tree.parent(v));
        for w in nbrs {
            if !seen[w] {
                seen[w] = true;
                prev[w] = v;
                queue.push_back(w);
            }
        }
    }
    let mut path = vec![b];
    let mut v = b;
    while v != a {
        v = prev[v];
        path.push(v);
    }
    path.reverse();
    path
}

/// The `k`-th ancestor of `node` (`k = 0` is the node itself).
pub fn ancestor_at(tree: &Tree, node: NodeId, k: usize) -> Option<NodeId> {
    let mut v = node;
    for _ in 0..k {
        v = tree.parent(v)?;
    }
    Some(v)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildInfo {
    pub node: NodeId,
    pub is_leaf: bool,
}

pub fn children_and_leaves(tree: &Tree, node: NodeId) -> Vec<ChildInfo> {
    tree.children(node)
        .iter()
        .map(|&c| ChildInfo {
            node: c,
            is_leaf: tree.is_leaf(c),
        })
        .collect()
}

/// C(n) = (2n)! / ((n+1)! n!), computed exactly.
pub fn catalan_number(n: u32) -> BigUint {
    // C(n) = prod_{k=2..n} (n+k)/k, kept integral by multiplying first
    let mut num = BigUint::one();
    let mut den = BigUint::one();
    for k in 2..=n {
        num *= n + k;
        den *= k;
    }
    num / den
}

pub fn factorial(n: u32) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, k| acc * k)
}

/// (n+1)! · C(n): labelings of the Catalan-counted shapes on n+1 nodes.
pub fn labeled_tree_count(n: u32) -> BigUint {
    factorial(n + 1) * catalan_number(n)
}

/// Where the reference model's next-step decision came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionSource {
    /// The goal's ancestor chain (within budget) reached the current node.
    BackwardChain,
    /// The chain reached the current node only after merging register
    /// subpaths.
    PathMerge,
    /// Neither; children are ranked with non-leaves first.
    Lookahead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NextStep {
    /// Best candidate first.
    pub ranked: Vec<NodeId>,
    pub source: DecisionSource,
}

impl NextStep {
    pub fn best(&self) -> Option<NodeId> {
        self.ranked.first().copied()
    }
}

/// A contiguous ancestor chain `[subgoal, parent(subgoal), ...]` of at most
/// `depth` edges, as a register position would hold it.
pub fn register_chain(tree: &Tree, subgoal: NodeId, depth: usize) -> Vec<NodeId> {
    let mut chain = vec![subgoal];
    let mut v = subgoal;
    for _ in 0..depth {
        match tree.parent(v) {
            Some(p) => {
                chain.push(p);
                v = p;
            }
            None => break,
        }
    }
    chain
}

/// Executable form of the mechanism: backward-chain from the goal for at
/// most `depth_budget` edges (`None` = unlimited), extend the chain with any
/// register subpath that overlaps its top, and otherwise fall back to
/// ranking the current node's non-leaf children above its leaf children.
///
/// `current` is the last path node already emitted.
pub fn high_level_next_token(
    instance: &TaskInstance,
    current: NodeId,
    depth_budget: Option<usize>,
    registers: &[Vec<NodeId>],
) -> NextStep {
    let tree = &instance.tree;
    let budget = depth_budget.unwrap_or(usize::MAX);
    let mut chain = vec![instance.goal];
    while chain.len() - 1 < budget {
        match tree.parent(*chain.last().unwrap()) {
            Some(p) => chain.push(p),
            None => break,
        }
    }
    if let Some(next) = step_from_chain(&chain, current) {
        return NextStep {
            ranked: vec![next],
            source: DecisionSource::BackwardChain,
        };
    }
    let mut used = vec![false; registers.len()];
    loop {
        let top = *chain.last().unwrap();
        let hit = registers
            .iter()
            .enumerate()
            .find(|(i, r)| !used[*i] && r.contains(&top));
        let Some((i, reg)) = hit else { break };
        used[i] = true;
        let at = reg.iter().position(|&v| v == top).unwrap();
        chain.extend_from_slice(&reg[at + 1..]);
        if let Some(next) = step_from_chain(&chain, current) {
            return NextStep {
                ranked: vec![next],
                source: DecisionSource::PathMerge,
            };
        }
    }
    let mut kids = children_and_leaves(tree, current);
    kids.sort_by_key(|c| (c.is_leaf, c.node));
    NextStep {
        ranked: kids.into_iter().map(|c| c.node).collect(),
        source: DecisionSource::Lookahead,
    }
}

/// In an upward chain `[goal, ..., top]`, the element just below `current`.
fn step_from_chain(chain: &[NodeId], current: NodeId) -> Option<NodeId> {
    let i = chain.iter().position(|&v| v == current)?;
    if i == 0 {
        None
    } else {
        Some(chain[i - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{generate_instance, sample_tree, EdgeOrder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> Tree {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Tree::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn path_basics() {
        let t = chain(3);
        assert_eq!(unique_path(&t, 1, 1), vec![1]);
        assert_eq!(unique_path(&t, 0, 2), vec![0, 1, 2]);
        assert_eq!(unique_path(&t, 2, 0), vec![2, 1, 0]);
    }

    #[test]
    fn path_agrees_with_bfs_and_reverses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let t = sample_tree(&mut rng, 16).unwrap();
            let a = rand::Rng::random_range(&mut rng, 0..16);
            let b = rand::Rng::random_range(&mut rng, 0..16);
            let p = unique_path(&t, a, b);
            assert_eq!(p, bfs_path(&t, a, b));
            let mut r = unique_path(&t, b, a);
            r.reverse();
            assert_eq!(p, r);
        }
    }

    #[test]
    fn ancestors() {
        let t = chain(4);
        assert_eq!(ancestor_at(&t, 3, 0), Some(3));
        assert_eq!(ancestor_at(&t, 3, 2), Some(1));
        assert_eq!(ancestor_at(&t, 3, 4), None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1_000 {
            let t = sample_tree(&mut rng, 16).unwrap();
            for v in 0..16 {
                assert_eq!(ancestor_at(&t, v, t.depth(v)), Some(t.root()));
            }
        }
    }

    #[test]
    fn children_with_leaf_flags() {
        let t = Tree::from_edges(4, &[(0, 1), (0, 2), (1, 3)]).unwrap();
        assert_eq!(
            children_and_leaves(&t, 0),
            vec![
                ChildInfo { node: 1, is_leaf: false },
                ChildInfo { node: 2, is_leaf: true }
            ]
        );
        assert!(children_and_leaves(&t, 3).is_empty());
    }

    #[test]
    fn catalan_values_and_recurrence() {
        assert_eq!(catalan_number(0), 1u32.into());
        assert_eq!(catalan_number(1), 1u32.into());
        assert_eq!(catalan_number(3), 5u32.into());
        assert_eq!(catalan_number(15), 9_694_845u32.into());
        for n in 0..12u32 {
            let sum: BigUint = (0..=n).map(|i| catalan_number(i) * catalan_number(n - i)).sum();
            assert_eq!(catalan_number(n + 1), sum);
        }
    }

    #[test]
    fn labeled_counts() {
        assert_eq!(labeled_tree_count(1), 2u32.into());
        assert_eq!(labeled_tree_count(3), 120u32.into());
        let expected = factorial(16) * BigUint::from(9_694_845u32);
        assert_eq!(labeled_tree_count(15), expected);
        assert_eq!(labeled_tree_count(15).to_string(), "202843204931727360000");
    }

    #[test]
    fn unlimited_budget_reproduces_path() {
        for seed in 0..2_000 {
            let inst = generate_instance(seed, 16, EdgeOrder::Shuffled).unwrap();
            for w in inst.path.windows(2) {
                let s = high_level_next_token(&inst, w[0], None, &[]);
                assert_eq!(s.best(), Some(w[1]));
                assert_eq!(s.source, DecisionSource::BackwardChain);
            }
        }
    }

    #[test]
    fn merging_bridges_a_deep_goal() {
        // chain 0→1→2→3→4→5 with 5 as goal; budget 2 reaches only 3
        let edges: Vec<_> = (0..5).map(|i| (i, i + 1)).collect();
        let tree = Tree::from_edges(6, &edges).unwrap();
        let inst = TaskInstance {
            tree: tree.clone(),
            goal: 5,
            path: vec![0, 1, 2, 3, 4, 5],
            edge_order: edges,
            seed: 0,
        };
        let no_reg = high_level_next_token(&inst, 0, Some(2), &[]);
        assert_eq!(no_reg.source, DecisionSource::Lookahead);
        let reg = register_chain(&tree, 3, 3); // [3, 2, 1, 0]
        let merged = high_level_next_token(&inst, 0, Some(2), &[reg]);
        assert_eq!(merged.source, DecisionSource::PathMerge);
        assert_eq!(merged.best(), Some(1));
    }

    #[test]
    fn lookahead_prefers_non_leaf() {
        // 0→{1,2}, 1→3, 3→4, 4→5; goal 5, budget 1 from 0 falls back
        let edges = vec![(0, 1), (0, 2), (1, 3), (3, 4), (4, 5)];
        let tree = Tree::from_edges(6, &edges).unwrap();
        let inst = TaskInstance {
            tree,
            goal: 5,
            path: vec![0, 1, 3, 4, 5],
            edge_order: edges,
            seed: 0,
        };
        let s = high_level_next_token(&inst, 0, Some(1), &[]);
        assert_eq!(s.source, DecisionSource::Lookahead);
        assert_eq!(s.ranked, vec![1, 2]);
    }
}
