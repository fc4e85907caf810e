use serde::{Deserialize, Serialize};

use super::registers::Register;
use crate::oracle::{children_and_leaves, register_chain};
use crate::task::{Layout, NodeId, Region, TaskInstance, MAX_NODES};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    EdgeAtTarget,
    EdgeAtSource,
    GoalAtPath,
    SubpathAtRegister,
    ChildrenAtPath,
    LeavesAtPath,
}

impl LabelKind {
    pub const ALL: [LabelKind; 6] = [
        LabelKind::EdgeAtTarget,
        LabelKind::EdgeAtSource,
        LabelKind::GoalAtPath,
        LabelKind::SubpathAtRegister,
        LabelKind::ChildrenAtPath,
        LabelKind::LeavesAtPath,
    ];

    pub fn is_multilabel(self) -> bool {
        matches!(self, LabelKind::SubpathAtRegister | LabelKind::ChildrenAtPath | LabelKind::LeavesAtPath)
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::EdgeAtTarget => "edge-at-target",
            LabelKind::EdgeAtSource => "edge-at-source",
            LabelKind::GoalAtPath => "goal-at-path",
            LabelKind::SubpathAtRegister => "subpath-at-register",
            LabelKind::ChildrenAtPath => "children-at-path",
            LabelKind::LeavesAtPath => "leaves-at-path",
        }
    }
}

impl std::str::FromStr for LabelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LabelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown label kind {s:?}")))
    }
}

impl std::fmt::Display for LabelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Edge { source: NodeId, target: NodeId },
    Class(usize),
    /// Multilabel indicator vector.
    Bits(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub instance: usize,
    pub position: usize,
    pub label: Label,
}

/// 16×16 adjacency (row = parent, column = child) of the ancestor chain of
/// `subgoal`, at most `depth` edges long.
pub fn subpath_adjacency(instance: &TaskInstance, subgoal: NodeId, depth: usize) -> Vec<bool> {
    let mut bits = vec![false; MAX_NODES * MAX_NODES];
    let chain = register_chain(&instance.tree, subgoal, depth);
    for w in chain.windows(2) {
        bits[w[1] * MAX_NODES + w[0]] = true;
    }
    bits
}

fn node_bits(nodes: impl IntoIterator<Item = NodeId>) -> Vec<bool> {
    let mut bits = vec![false; MAX_NODES];
    for v in nodes {
        bits[v] = true;
    }
    bits
}

/// Every labeled position of `kind` in each instance. Subpath labels need
/// the registers detected on each instance and the chain depth the probed
/// stream is expected to hold.
pub fn build_probe_labels(
    kind: LabelKind,
    instances: &[TaskInstance],
    registers: Option<&[Vec<Register>]>,
    subpath_depth: usize,
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    if kind == LabelKind::SubpathAtRegister {
        let regs = registers.ok_or_else(|| Error::precondition("subpath labels need register positions"))?;
        if regs.len() != instances.len() {
            return Err(Error::precondition("register list does not match the instances"));
        }
        for (i, (inst, rs)) in instances.iter().zip(regs).enumerate() {
            for r in rs {
                out.push(LabeledExample {
                    instance: i,
                    position: r.position,
                    label: Label::Bits(subpath_adjacency(inst, r.subgoal, subpath_depth)),
                });
            }
        }
        return Ok(out);
    }
    for (i, inst) in instances.iter().enumerate() {
        let layout = Layout::new(inst.n_nodes())?;
        match kind {
            LabelKind::EdgeAtTarget | LabelKind::EdgeAtSource => {
                for (e, &(a, b)) in inst.edge_order.iter().enumerate() {
                    let position = if kind == LabelKind::EdgeAtTarget {
                        layout.edge_target_position(e)
                    } else {
                        layout.edge_source_position(e)
                    };
                    out.push(LabeledExample { instance: i, position, label: Label::Edge { source: a, target: b } });
                }
            }
            _ => {
                for (k, &node) in inst.path.iter().enumerate() {
                    let position = layout.path_start() + k;
                    debug_assert_eq!(layout.region(position), Region::Path);
                    let label = match kind {
                        LabelKind::GoalAtPath => Label::Class(inst.goal),
                        LabelKind::ChildrenAtPath => {
                            Label::Bits(node_bits(children_and_leaves(&inst.tree, node).into_iter().map(|c| c.node)))
                        }
                        _ => Label::Bits(node_bits(
                            children_and_leaves(&inst.tree, node)
                                .into_iter()
                                .filter(|c| c.is_leaf)
                                .map(|c| c.node),
                        )),
                    };
                    out.push(LabeledExample { instance: i, position, label });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Tree;

    fn inst(edges: &[(usize, usize)], goal: usize) -> TaskInstance {
        let tree = Tree::from_edges(edges.len() + 1, edges).unwrap();
        let path = tree.path_from_root(goal);
        TaskInstance { tree, goal, path, edge_order: edges.to_vec(), seed: 0 }
    }

    #[test]
    fn edge_label_at_target_position() {
        let i = inst(&[(0, 1), (3, 7), (0, 3), (1, 2), (2, 4), (4, 5), (5, 6)], 7);
        let ex = build_probe_labels(LabelKind::EdgeAtTarget, std::slice::from_ref(&i), None, 0).unwrap();
        assert_eq!(ex[1].position, 4);
        assert_eq!(ex[1].label, Label::Edge { source: 3, target: 7 });
        let ex = build_probe_labels(LabelKind::EdgeAtSource, &[i], None, 0).unwrap();
        assert_eq!(ex[1].position, 3);
    }

    #[test]
    fn subpath_chain_bits() {
        let i = inst(&[(0, 1), (1, 2), (2, 3)], 3);
        let bits = subpath_adjacency(&i, 3, 2);
        let set: Vec<(usize, usize)> = (0..256).filter(|&k| bits[k]).map(|k| (k / 16, k % 16)).collect();
        assert_eq!(set, vec![(1, 2), (2, 3)]);
    }

    #[test]
    fn children_and_leaf_bits() {
        // 0 → {4, 9}; 4 → {1}; 9 is a leaf
        let i = inst(&[(0, 4), (0, 9), (4, 1), (1, 2), (2, 3), (3, 5), (5, 6), (6, 7), (7, 8)], 1);
        let ch = build_probe_labels(LabelKind::ChildrenAtPath, std::slice::from_ref(&i), None, 0).unwrap();
        let lv = build_probe_labels(LabelKind::LeavesAtPath, std::slice::from_ref(&i), None, 0).unwrap();
        let on = |l: &Label| match l {
            Label::Bits(b) => (0..16).filter(|&k| b[k]).collect::<Vec<_>>(),
            _ => unreachable!(),
        };
        assert_eq!(on(&ch[0].label), vec![4, 9]);
        assert_eq!(on(&lv[0].label), vec![9]);
    }

    #[test]
    fn subpath_without_registers_is_a_precondition_error() {
        let i = inst(&[(0, 1)], 1);
        assert!(matches!(
            build_probe_labels(LabelKind::SubpathAtRegister, &[i], None, 3),
            Err(Error::Precondition(_))
        ));
    }
}
