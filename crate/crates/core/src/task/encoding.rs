use serde::{Deserialize, Serialize};

use super::{Token, TaskInstance, Tree, Vocabulary, MAX_NODES};
use crate::{Error, Result};

/// Position bookkeeping for an `n`-node prompt.
///
/// ```text
/// [A1 →B1 ,] [A2 →B2 ,] ... [An-1 →Bn-1 ,]  →G  |  P1 P2 ... Pm  PAD...
/// ```
///
/// For 16 nodes the goal sits at 45, `|` at 46, the root at 47, and the
/// context is 63 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_nodes: usize,
}

impl Layout {
    pub fn new(n_nodes: usize) -> Result<Self> {
        if !(2..=MAX_NODES).contains(&n_nodes) {
            return Err(Error::invalid(format!(
                "token layout supports 2..={MAX_NODES} nodes, got {n_nodes}"
            )));
        }
        Ok(Layout { n_nodes })
    }

    pub fn n_edges(&self) -> usize {
        self.n_nodes - 1
    }

    /// Length of the edge region (three tokens per edge).
    pub fn edge_region_len(&self) -> usize {
        3 * self.n_edges()
    }

    pub fn goal_position(&self) -> usize {
        self.edge_region_len()
    }

    pub fn task_sep_position(&self) -> usize {
        self.goal_position() + 1
    }

    pub fn path_start(&self) -> usize {
        self.goal_position() + 2
    }

    pub fn context_len(&self) -> usize {
        self.path_start() + self.n_nodes
    }

    pub fn edge_source_position(&self, edge_index: usize) -> usize {
        3 * edge_index
    }

    pub fn edge_target_position(&self, edge_index: usize) -> usize {
        3 * edge_index + 1
    }

    pub fn comma_position(&self, edge_index: usize) -> usize {
        3 * edge_index + 2
    }

    pub fn region(&self, position: usize) -> Region {
        let e = self.edge_region_len();
        match position {
            p if p < e => match p % 3 {
                0 => Region::EdgeSource,
                1 => Region::EdgeTarget,
                _ => Region::Separator,
            },
            p if p == e => Region::Goal,
            p if p == e + 1 => Region::TaskSep,
            _ => Region::Path,
        }
    }

    /// Infers the node count from a full-length sequence.
    pub fn from_context_len(len: usize) -> Result<Self> {
        if !(len + 1).is_multiple_of(4) {
            return Err(Error::invalid(format!("{len} is not a valid context length")));
        }
        Layout::new((len + 1) / 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    EdgeSource,
    EdgeTarget,
    Separator,
    Goal,
    TaskSep,
    Path,
    Pad,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    /// `loss_mask[i]` marks that position `i` is trained to predict
    /// `tokens[i + 1]`.
    pub loss_mask: Vec<bool>,
    pub regions: Vec<Region>,
    pub goal_position: usize,
    pub path_start: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Next-token targets; the final position has none and is filled with PAD.
    pub fn targets(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.tokens[1..].to_vec();
        t.push(Vocabulary::PAD);
        t
    }

    /// Tokens before the first PAD.
    pub fn unpadded_len(&self) -> usize {
        self.tokens
            .iter()
            .position(|&t| t == Vocabulary::PAD)
            .unwrap_or(self.tokens.len())
    }

    /// Prompt up to and including the root token.
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..=self.path_start]
    }
}

pub fn encode_instance(instance: &TaskInstance) -> Result<TokenSequence> {
    let layout = Layout::new(instance.n_nodes())?;
    let ctx = layout.context_len();
    if instance.path.len() > layout.n_nodes {
        return Err(Error::Internal(format!(
            "path of {} nodes cannot fit a {}-node tree",
            instance.path.len(),
            layout.n_nodes
        )));
    }
    if instance.edge_order.len() != layout.n_edges() {
        return Err(Error::invalid("edge_order length does not match tree"));
    }
    let mut tokens = Vec::with_capacity(ctx);
    for &(a, b) in &instance.edge_order {
        tokens.push(Vocabulary::source(a));
        tokens.push(Vocabulary::target(b));
        tokens.push(Vocabulary::COMMA);
    }
    tokens.push(Vocabulary::target(instance.goal));
    tokens.push(Vocabulary::TASK_SEP);
    tokens.extend(instance.path.iter().map(|&p| Vocabulary::source(p)));
    let used = tokens.len();
    tokens.resize(ctx, Vocabulary::PAD);

    let path_start = layout.path_start();
    let mut regions: Vec<Region> = (0..ctx).map(|p| layout.region(p)).collect();
    for r in regions.iter_mut().skip(used) {
        *r = Region::Pad;
    }
    let mut loss_mask = vec![false; ctx];
    for m in loss_mask
        .iter_mut()
        .skip(path_start)
        .take(instance.path.len().saturating_sub(1))
    {
        *m = true;
    }
    Ok(TokenSequence {
        tokens,
        loss_mask,
        regions,
        goal_position: layout.goal_position(),
        path_start,
    })
}

/// Parses a (possibly partial) token sequence for an `n_nodes` tree.
///
/// The path region may stop early or be followed by padding; the returned
/// instance carries whatever prefix of the path is present and seed 0.
pub fn decode_tokens(tokens: &[u32], n_nodes: usize) -> Result<TaskInstance> {
    let layout = Layout::new(n_nodes)?;
    let perr = |position: usize, message: String| Error::Parse { position, message };
    if tokens.len() <= layout.path_start() {
        return Err(perr(
            tokens.len(),
            format!("sequence ends before the root position {}", layout.path_start()),
        ));
    }
    if tokens.len() > layout.context_len() {
        return Err(perr(layout.context_len(), "sequence longer than the context".into()));
    }
    let node = |pos: usize, want_target: bool| -> Result<usize> {
        match Vocabulary::token(tokens[pos]) {
            Some(Token::Source(n)) if !want_target && n < n_nodes => Ok(n),
            Some(Token::Target(n)) if want_target && n < n_nodes => Ok(n),
            _ => Err(perr(
                pos,
                format!(
                    "expected a {} node token, found {}",
                    if want_target { "target-form" } else { "source-form" },
                    Vocabulary::symbol(tokens[pos])
                ),
            )),
        }
    };
    let mut edges = Vec::with_capacity(layout.n_edges());
    for i in 0..layout.n_edges() {
        let a = node(layout.edge_source_position(i), false)?;
        let b = node(layout.edge_target_position(i), true)?;
        let c = layout.comma_position(i);
        if tokens[c] != Vocabulary::COMMA {
            return Err(perr(c, format!("expected ',', found {}", Vocabulary::symbol(tokens[c]))));
        }
        edges.push((a, b));
    }
    let goal = node(layout.goal_position(), true)?;
    let sep = layout.task_sep_position();
    if tokens[sep] != Vocabulary::TASK_SEP {
        return Err(perr(sep, format!("expected '|', found {}", Vocabulary::symbol(tokens[sep]))));
    }
    let mut path = Vec::new();
    let mut padded = false;
    for (pos, &tok) in tokens.iter().enumerate().skip(layout.path_start()) {
        if tok == Vocabulary::PAD {
            padded = true;
            continue;
        }
        if padded {
            return Err(perr(pos, "token after padding".into()));
        }
        path.push(node(pos, false)?);
    }
    if path.is_empty() {
        return Err(perr(layout.path_start(), "missing root token".into()));
    }
    let tree = Tree::from_edges_indexed(n_nodes, &edges).map_err(|(idx, e)| {
        perr(idx.map(|i| layout.edge_source_position(i)).unwrap_or(0), e.to_string())
    })?;
    if path[0] != tree.root() {
        return Err(perr(layout.path_start(), format!("path starts at {} but root is {}", path[0], tree.root())));
    }
    Ok(TaskInstance {
        tree,
        goal,
        path,
        edge_order: edges,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{generate_instance, EdgeOrder};
    use proptest::prelude::*;

    #[test]
    fn sixteen_node_positions() {
        let l = Layout::new(16).unwrap();
        assert_eq!(l.goal_position(), 45);
        assert_eq!(l.task_sep_position(), 46);
        assert_eq!(l.path_start(), 47);
        assert_eq!(l.context_len(), 63);
        assert_eq!(Layout::from_context_len(63).unwrap().n_nodes, 16);
    }

    #[test]
    fn commas_at_two_mod_three() {
        for seed in 0..50 {
            let inst = generate_instance(seed, 16, EdgeOrder::Shuffled).unwrap();
            let seq = encode_instance(&inst).unwrap();
            let commas: Vec<usize> = (0..seq.len())
                .filter(|&i| seq.tokens[i] == Vocabulary::COMMA)
                .collect();
            let expected: Vec<usize> = (0..15).map(|i| 3 * i + 2).collect();
            assert_eq!(commas, expected);
            assert_eq!(seq.unpadded_len(), 47 + inst.path.len());
            assert!(seq.unpadded_len() <= 63);
        }
    }

    #[test]
    fn mask_covers_path_predictions() {
        let inst = generate_instance(9, 16, EdgeOrder::Shuffled).unwrap();
        let seq = encode_instance(&inst).unwrap();
        let m = inst.path.len();
        let masked: Vec<usize> = (0..63).filter(|&i| seq.loss_mask[i]).collect();
        assert_eq!(masked, (47..47 + m - 1).collect::<Vec<_>>());
        let targets = seq.targets();
        for &i in &masked {
            assert!(matches!(Vocabulary::token(targets[i]), Some(Token::Source(_))));
            assert_eq!(seq.regions[i + 1], Region::Path);
        }
    }

    #[test]
    fn comma_violation_reports_position() {
        let inst = generate_instance(1, 16, EdgeOrder::Shuffled).unwrap();
        let mut seq = encode_instance(&inst).unwrap();
        seq.tokens[2] = Vocabulary::source(3);
        match decode_tokens(&seq.tokens, 16) {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn partial_path_decodes_to_root_only() {
        let inst = generate_instance(4, 16, EdgeOrder::Shuffled).unwrap();
        let seq = encode_instance(&inst).unwrap();
        let d = decode_tokens(seq.prompt(), 16).unwrap();
        assert_eq!(d.path, vec![inst.root()]);
        assert_eq!(d.goal, inst.goal);
    }

    #[test]
    fn too_long_path_is_internal_error() {
        let mut inst = generate_instance(4, 16, EdgeOrder::Shuffled).unwrap();
        inst.path = vec![0; 17];
        assert!(matches!(encode_instance(&inst), Err(Error::Internal(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn decode_inverts_encode(seed in any::<u64>(), n in 2usize..=16) {
            let inst = generate_instance(seed, n, EdgeOrder::Shuffled).unwrap();
            let seq = encode_instance(&inst).unwrap();
            let back = decode_tokens(&seq.tokens, n).unwrap();
            prop_assert_eq!(&back.edge_order, &inst.edge_order);
            prop_assert_eq!(back.goal, inst.goal);
            prop_assert_eq!(&back.path, &inst.path);
            prop_assert_eq!(&back.tree, &inst.tree);
            // regions partition positions and PAD is a suffix
            let first_pad = seq.regions.iter().position(|r| *r == Region::Pad).unwrap_or(seq.len());
            prop_assert!(seq.regions[first_pad..].iter().all(|r| *r == Region::Pad));
            prop_assert!(seq.tokens.iter().all(|&t| (t as usize) < Vocabulary::SIZE));
        }
    }
}
