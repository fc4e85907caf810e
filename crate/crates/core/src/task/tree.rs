use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type NodeId = usize;

/// A labeled rooted tree where every node has at most two children.
///
/// Children are kept sorted by label; the sampler's left/right order is
/// not part of the structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct Tree {
    root: NodeId,
    parent: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    n_nodes: usize,
    edges: Vec<(NodeId, NodeId)>,
}

impl TryFrom<TreeRepr> for Tree {
    type Error = Error;
    fn try_from(r: TreeRepr) -> Result<Self> {
        Tree::from_edges(r.n_nodes, &r.edges)
    }
}

impl From<Tree> for TreeRepr {
    fn from(t: Tree) -> Self {
        TreeRepr {
            n_nodes: t.n_nodes(),
            edges: t.edges(),
        }
    }
}

impl Tree {
    /// Builds a tree from parent→child edges, validating that they form a
    /// connected, acyclic, at-most-binary tree over `0..n_nodes`.
    pub fn from_edges(n_nodes: usize, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        Self::from_edges_indexed(n_nodes, edges).map_err(|(_, e)| e)
    }

    /// Like [`Tree::from_edges`], but reports which edge (by index) first
    /// violated the structure, when one can be blamed.
    pub(crate) fn from_edges_indexed(
        n_nodes: usize,
        edges: &[(NodeId, NodeId)],
    ) -> std::result::Result<Self, (Option<usize>, Error)> {
        if n_nodes == 0 {
            return Err((None, Error::invalid("tree must have at least one node")));
        }
        if edges.len() + 1 != n_nodes {
            return Err((
                None,
                Error::invalid(format!(
                    "{} edges cannot span {} nodes",
                    edges.len(),
                    n_nodes
                )),
            ));
        }
        let mut parent = vec![None; n_nodes];
        let mut children = vec![Vec::new(); n_nodes];
        for (i, &(p, c)) in edges.iter().enumerate() {
            if p >= n_nodes || c >= n_nodes {
                return Err((Some(i), Error::invalid(format!("edge ({p}, {c}) out of range"))));
            }
            if p == c {
                return Err((Some(i), Error::invalid(format!("self loop at {p}"))));
            }
            if parent[c].is_some() {
                return Err((Some(i), Error::invalid(format!("node {c} has two parents"))));
            }
            if children[p].len() == 2 {
                return Err((Some(i), Error::invalid(format!("node {p} has more than two children"))));
            }
            parent[c] = Some(p);
            children[p].push(c);
        }
        let roots: Vec<_> = (0..n_nodes).filter(|&v| parent[v].is_none()).collect();
        if roots.len() != 1 {
            return Err((None, Error::invalid(format!("expected one root, found {}", roots.len()))));
        }
        let root = roots[0];
        // every node must reach the root without revisiting
        for start in 0..n_nodes {
            let mut v = start;
            for _ in 0..n_nodes {
                match parent[v] {
                    Some(p) => v = p,
                    None => break,
                }
            }
            if v != root {
                return Err((None, Error::invalid("edges contain a cycle")));
            }
        }
        for c in &mut children {
            c.sort_unstable();
        }
        Ok(Tree {
            root,
            parent,
            children,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent[node]
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.children[node]
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.children[node].is_empty()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        (0..self.n_nodes())
            .filter(|&v| v != self.root && self.is_leaf(v))
            .collect()
    }

    pub fn depth(&self, node: NodeId) -> usize {
        let mut d = 0;
        let mut v = node;
        while let Some(p) = self.parent[v] {
            v = p;
            d += 1;
        }
        d
    }

    /// All edges as (parent, child), sorted; doubles as the tree's identity.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out: Vec<_> = (0..self.n_nodes())
            .filter_map(|c| self.parent[c].map(|p| (p, c)))
            .collect();
        out.sort_unstable();
        out
    }

    /// Root-to-node path obtained by walking parent links.
    pub fn path_from_root(&self, node: NodeId) -> Vec<NodeId> {
        let mut path = vec![node];
        let mut v = node;
        while let Some(p) = self.parent[v] {
            path.push(p);
            v = p;
        }
        path.reverse();
        path
    }
}

/// An unlabeled binary tree with distinguished left/right children,
/// indexed `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OrderedShape {
    pub root: usize,
    pub left: Vec<Option<usize>>,
    pub right: Vec<Option<usize>>,
}

impl OrderedShape {
    pub fn n_nodes(&self) -> usize {
        self.left.len()
    }

    /// Canonical preorder encoding: `1` for a present child, `0` for an
    /// absent one. Two shapes are equal iff their encodings are.
    pub fn preorder_code(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 * self.n_nodes());
        self.encode(Some(self.root), &mut out);
        out
    }

    fn encode(&self, node: Option<usize>, out: &mut Vec<u8>) {
        match node {
            None => out.push(0),
            Some(v) => {
                out.push(1);
                self.encode(self.left[v], out);
                self.encode(self.right[v], out);
            }
        }
    }

    /// Node indices in preorder.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_nodes());
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            out.push(v);
            if let Some(r) = self.right[v] {
                stack.push(r);
            }
            if let Some(l) = self.left[v] {
                stack.push(l);
            }
        }
        out
    }

    /// Applies a labeling (`labels[i]` is the label of shape node `i`) and
    /// forgets the left/right distinction.
    pub fn label(&self, labels: &[NodeId]) -> Tree {
        let mut edges = Vec::with_capacity(self.n_nodes() - 1);
        for v in 0..self.n_nodes() {
            for c in [self.left[v], self.right[v]].into_iter().flatten() {
                edges.push((labels[v], labels[c]));
            }
        }
        Tree::from_edges(self.n_nodes(), &edges).expect("labeled shape is a valid tree")
    }
}

/// Uniform sample over the `C(n)` binary tree shapes with `n` nodes.
///
/// Grows a full binary tree leaf by leaf (Rémy's procedure) and keeps its
/// `n` internal nodes: replacing a uniformly chosen node by a fresh internal
/// node whose other child is a fresh leaf preserves uniformity at each size.
pub fn sample_ordered_shape<R: Rng + ?Sized>(rng: &mut R, n_nodes: usize) -> Result<OrderedShape> {
    if n_nodes < 1 {
        return Err(Error::invalid("shape needs at least one node"));
    }
    let total = 2 * n_nodes + 1;
    let mut left = Vec::with_capacity(total);
    let mut right = Vec::with_capacity(total);
    let mut up: Vec<Option<usize>> = Vec::with_capacity(total);
    left.push(None);
    right.push(None);
    up.push(None);
    let mut root = 0usize;
    for _ in 0..n_nodes {
        let x = rng.random_range(0..left.len());
        let y = left.len();
        let z = y + 1;
        let leaf_on_left = rng.random_bool(0.5);
        let (l, r) = if leaf_on_left { (z, x) } else { (x, z) };
        left.push(Some(l));
        right.push(Some(r));
        up.push(up[x]);
        left.push(None);
        right.push(None);
        up.push(Some(y));
        match up[x] {
            None => root = y,
            Some(p) => {
                if left[p] == Some(x) {
                    left[p] = Some(y);
                } else {
                    right[p] = Some(y);
                }
            }
        }
        up[x] = Some(y);
    }
    // internal nodes are exactly those with children; renumber them densely
    let mut index = vec![usize::MAX; left.len()];
    let mut next = 0;
    for v in 0..left.len() {
        if left[v].is_some() {
            index[v] = next;
            next += 1;
        }
    }
    let map = |c: Option<usize>| c.filter(|&c| left[c].is_some()).map(|c| index[c]);
    let mut shape = OrderedShape {
        root: index[root],
        left: vec![None; n_nodes],
        right: vec![None; n_nodes],
    };
    for v in 0..left.len() {
        if left[v].is_some() {
            shape.left[index[v]] = map(left[v]);
            shape.right[index[v]] = map(right[v]);
        }
    }
    Ok(shape)
}

/// Draws a labeled tree: uniform ordered binary shape, uniform labeling,
/// child order discarded.
pub fn sample_tree<R: Rng + ?Sized>(rng: &mut R, n_nodes: usize) -> Result<Tree> {
    if n_nodes < 2 {
        return Err(Error::invalid(format!("n_nodes must be at least 2, got {n_nodes}")));
    }
    let shape = sample_ordered_shape(rng, n_nodes)?;
    let mut labels: Vec<NodeId> = (0..n_nodes).collect();
    labels.shuffle(rng);
    Ok(shape.label(&labels))
}

/// Picks a uniformly random non-root leaf and returns it with the unique
/// root-to-goal path.
pub fn choose_goal_and_path<R: Rng + ?Sized>(
    rng: &mut R,
    tree: &Tree,
) -> Result<(NodeId, Vec<NodeId>)> {
    let leaves = tree.leaves();
    if leaves.is_empty() {
        return Err(Error::invalid("tree has no leaf distinct from the root"));
    }
    let goal = leaves[rng.random_range(0..leaves.len())];
    Ok((goal, tree.path_from_root(goal)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeOrder {
    #[default]
    Shuffled,
    /// Deepest edges first; within a level, edges into leaves first.
    Backward,
    /// Shallowest edges first.
    Forward,
}

impl std::str::FromStr for EdgeOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffled" => Ok(EdgeOrder::Shuffled),
            "backward" => Ok(EdgeOrder::Backward),
            "forward" => Ok(EdgeOrder::Forward),
            other => Err(Error::invalid(format!("unknown edge order {other:?}"))),
        }
    }
}

impl std::fmt::Display for EdgeOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EdgeOrder::Shuffled => "shuffled",
            EdgeOrder::Backward => "backward",
            EdgeOrder::Forward => "forward",
        })
    }
}

/// Presentation order of the edge list. The level orders are shuffled
/// within a level.
pub fn shuffle_edges<R: Rng + ?Sized>(
    rng: &mut R,
    tree: &Tree,
    order: EdgeOrder,
) -> Vec<(NodeId, NodeId)> {
    let mut edges = tree.edges();
    edges.shuffle(rng);
    match order {
        EdgeOrder::Shuffled => {}
        EdgeOrder::Backward => edges.sort_by_key(|&(_, c)| {
            (std::cmp::Reverse(tree.depth(c)), !tree.is_leaf(c))
        }),
        EdgeOrder::Forward => edges.sort_by_key(|&(_, c)| tree.depth(c)),
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> Tree {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Tree::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn two_node_tree_is_root_with_one_child() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = sample_tree(&mut rng, 2).unwrap();
            assert_eq!(t.edges().len(), 1);
            assert_eq!(t.children(t.root()).len(), 1);
        }
    }

    #[test]
    fn sixteen_node_trees_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = sample_tree(&mut rng, 16).unwrap();
            assert_eq!(t.edges().len(), 15);
            assert!((0..16).all(|v| t.children(v).len() <= 2));
            assert_eq!((0..16).filter(|&v| t.parent(v).is_none()).count(), 1);
        }
    }

    #[test]
    fn rejects_tiny_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_tree(&mut rng, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(sample_tree(&mut rng, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn chain_goal_and_path() {
        let t = chain(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (goal, path) = choose_goal_and_path(&mut rng, &t).unwrap();
        assert_eq!(goal, 2);
        assert_eq!(path, vec![0, 1, 2]);
    }

    #[test]
    fn goal_is_uniform_over_two_leaves() {
        let t = Tree::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let mut ones = 0usize;
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (g, _) = choose_goal_and_path(&mut rng, &t).unwrap();
            ones += usize::from(g == 1);
        }
        let freq = ones as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn single_node_has_no_goal() {
        let t = Tree::from_edges(1, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(choose_goal_and_path(&mut rng, &t).is_err());
    }

    #[test]
    fn structural_errors() {
        assert!(Tree::from_edges(3, &[(0, 1), (1, 0)]).is_err());
        assert!(Tree::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).is_err());
        assert!(Tree::from_edges(3, &[(0, 1), (2, 1)]).is_err());
        assert!(Tree::from_edges(3, &[(0, 1)]).is_err());
        assert!(Tree::from_edges(3, &[(1, 2), (2, 1)]).is_err());
    }

    #[test]
    fn two_node_edge_order() {
        let t = chain(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(shuffle_edges(&mut rng, &t, EdgeOrder::Shuffled), vec![(0, 1)]);
    }

    #[test]
    fn backward_order_lists_leaf_edges_before_root_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let t = sample_tree(&mut rng, 16).unwrap();
            let edges = shuffle_edges(&mut rng, &t, EdgeOrder::Backward);
            for (i, &(_, c)) in edges.iter().enumerate() {
                if !t.is_leaf(c) {
                    continue;
                }
                for (j, &(p2, c2)) in edges.iter().enumerate() {
                    if p2 == t.root() && (p2, c2) != edges[i] {
                        assert!(i < j, "leaf edge {:?} after root edge {:?}", edges[i], (p2, c2));
                    }
                }
            }
            let fwd = shuffle_edges(&mut rng, &t, EdgeOrder::Forward);
            assert!(fwd.windows(2).all(|w| t.depth(w[0].1) <= t.depth(w[1].1)));
        }
    }

    #[test]
    fn edge_permutations_are_uniform() {
        let t = Tree::from_edges(5, &[(0, 1), (0, 2), (1, 3), (2, 4)]).unwrap();
        let base = t.edges();
        let mut counts = std::collections::HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let trials = 5_000usize;
        for _ in 0..trials {
            let perm: Vec<usize> = shuffle_edges(&mut rng, &t, EdgeOrder::Shuffled)
                .iter()
                .map(|e| base.iter().position(|b| b == e).unwrap())
                .collect();
            *counts.entry(perm).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 24);
        let p = 1.0 / 24.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (perm, &c) in &counts {
            assert!((c as f64 - mean).abs() <= 4.0 * sigma, "{perm:?}: {c}");
        }
    }

    #[test]
    fn shape_code_round_trips_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..10 {
            let s = sample_ordered_shape(&mut rng, n).unwrap();
            assert_eq!(s.preorder().len(), n);
            assert_eq!(s.preorder_code().len(), 2 * n + 1);
        }
    }
}
