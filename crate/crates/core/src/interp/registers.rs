use serde::{Deserialize, Serialize};

use super::{for_each_cached, layout_for, prompts};
use crate::model::{ActivationCache, Parameters};
use crate::task::{Layout, NodeId, Region, TaskInstance, Token, Vocabulary, MAX_NODES};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegisterConfig {
    /// Minimum attention weight on a node token for a position to count as
    /// having selected a subgoal.
    pub threshold: f64,
    /// Block whose attention pattern selects subgoals.
    pub layer: usize,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        RegisterConfig { threshold: 0.3, layer: 0 }
    }
}

/// A register position and the node it selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Register {
    pub position: usize,
    /// Key position of the strongest node-token attention.
    pub key: usize,
    pub subgoal: NodeId,
    pub weight: f64,
}

/// Separators and edge sources: positions that either carry no task
/// information or whose information is copied onward to the edge target.
pub fn is_register_candidate(layout: &Layout, position: usize) -> bool {
    matches!(layout.region(position), Region::Separator | Region::EdgeSource)
}

/// Strongest attention from `position` to any node-token key in block
/// `layer`, earliest key on ties.
fn strongest_node_key(cache: &ActivationCache<f32>, b: usize, layer: usize, position: usize) -> Option<(usize, f64)> {
    let pat = cache.pattern(layer, b);
    let tokens = &cache.tokens[b];
    let mut best: Option<(usize, f64)> = None;
    for key in 0..=position {
        if Vocabulary::node_of(tokens[key]).is_none() {
            continue;
        }
        let w = pat[[position, key]] as f64;
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((key, w));
        }
    }
    best
}

/// Edge-region positions whose strongest node-token attention reaches the
/// threshold, regardless of the token they hold.
pub fn attention_criterion(
    cache: &ActivationCache<f32>,
    b: usize,
    layout: &Layout,
    config: &RegisterConfig,
) -> Vec<Register> {
    let end = layout.edge_region_len().min(cache.seq_len);
    (0..end)
        .filter_map(|pos| {
            let (key, weight) = strongest_node_key(cache, b, config.layer, pos)?;
            (weight >= config.threshold).then(|| Register {
                position: pos,
                key,
                subgoal: Vocabulary::node_of(cache.tokens[b][key]).expect("node key"),
                weight,
            })
        })
        .collect()
}

/// Register positions of sequence `b`: separator-like or redundant edge
/// region positions that pass the attention criterion.
pub fn detect_register_positions(
    cache: &ActivationCache<f32>,
    b: usize,
    layout: &Layout,
    config: &RegisterConfig,
) -> Vec<Register> {
    attention_criterion(cache, b, layout, config)
        .into_iter()
        .filter(|r| is_register_candidate(layout, r.position))
        .collect()
}

/// Registers for every instance, from forward passes over the prompts.
pub fn registers_for(
    params: &Parameters<f32>,
    instances: &[TaskInstance],
    config: &RegisterConfig,
) -> Result<Vec<Vec<Register>>> {
    let layout = layout_for(params)?;
    let seqs: Vec<Vec<u32>> = prompts(instances)?.into_iter().map(|s| s.prompt().to_vec()).collect();
    let mut out = Vec::with_capacity(instances.len());
    for_each_cached(params, &seqs, |_, cache| {
        for b in 0..cache.batch {
            out.push(detect_register_positions(cache, b, &layout, config));
        }
        Ok(())
    })?;
    Ok(out)
}

/// Subgoal counts at one register-candidate position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    pub position: usize,
    /// Trees that entered the tally.
    pub n_trees: usize,
    /// `counts[v]`: trees where the position selected node `v`.
    pub counts: Vec<usize>,
}

impl PositionStats {
    pub fn ratios(&self) -> Vec<f64> {
        let n = self.n_trees.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Most frequently selected node, lowest id on ties.
    pub fn preferred(&self) -> Option<NodeId> {
        let max = *self.counts.iter().max()?;
        (max > 0).then(|| self.counts.iter().position(|&c| c == max).unwrap())
    }

    pub fn concentration(&self) -> f64 {
        self.preferred().map_or(0.0, |v| self.ratios()[v])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalStats {
    pub threshold: f64,
    pub n_trees: usize,
    pub positions: Vec<PositionStats>,
    /// Same tally restricted, per position, to trees in which that
    /// position's preferred subgoal is a non-leaf whose source token occurs
    /// before the position.
    pub filtered: Vec<PositionStats>,
}

/// Which subgoal each register-candidate position selects, aggregated over
/// `instances`.
pub fn subgoal_statistics(
    params: &Parameters<f32>,
    instances: &[TaskInstance],
    config: &RegisterConfig,
) -> Result<SubgoalStats> {
    let layout = layout_for(params)?;
    let candidates: Vec<usize> = (0..layout.edge_region_len())
        .filter(|&p| is_register_candidate(&layout, p))
        .collect();
    let seqs: Vec<Vec<u32>> = prompts(instances)?.into_iter().map(|s| s.prompt().to_vec()).collect();
    // selections[tree][candidate index]
    let mut selections: Vec<Vec<Option<NodeId>>> = Vec::with_capacity(instances.len());
    for_each_cached(params, &seqs, |_, cache| {
        for b in 0..cache.batch {
            let regs = detect_register_positions(cache, b, &layout, config);
            selections.push(
                candidates
                    .iter()
                    .map(|p| regs.iter().find(|r| r.position == *p).map(|r| r.subgoal))
                    .collect(),
            );
        }
        Ok(())
    })?;

    let tally = |ci: usize, keep: &dyn Fn(usize) -> bool| {
        let mut counts = vec![0; MAX_NODES];
        let mut n = 0;
        for (t, sel) in selections.iter().enumerate() {
            if !keep(t) {
                continue;
            }
            n += 1;
            if let Some(v) = sel[ci] {
                counts[v] += 1;
            }
        }
        PositionStats { position: candidates[ci], n_trees: n, counts }
    };
    let positions: Vec<PositionStats> = (0..candidates.len()).map(|ci| tally(ci, &|_| true)).collect();
    let filtered = positions
        .iter()
        .enumerate()
        .map(|(ci, st)| match st.preferred() {
            Some(v) => tally(ci, &|t| {
                let inst = &instances[t];
                v < inst.n_nodes()
                    && !inst.tree.is_leaf(v)
                    && seqs[t][..st.position]
                        .iter()
                        .any(|&tok| Vocabulary::token(tok) == Some(Token::Source(v)))
            }),
            None => PositionStats { position: st.position, n_trees: 0, counts: vec![0; MAX_NODES] },
        })
        .collect();
    Ok(SubgoalStats { threshold: config.threshold, n_trees: instances.len(), positions, filtered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig, Norm};
    use crate::task::{build_dataset, encode_instance, DatasetConfig, EdgeOrder};

    fn setup() -> (Parameters<f32>, Vec<TaskInstance>) {
        let cfg = ModelConfig { context_len: 31, init_scale: 0.5, ..ModelConfig::tiny(2, 16, Norm::None) };
        let data = build_dataset(&DatasetConfig { seed: 4, count: 40, n_nodes: 8, order: EdgeOrder::Shuffled }, None)
            .unwrap();
        (Parameters::init(&cfg).unwrap(), data)
    }

    #[test]
    fn thresholds_bound_the_criterion() {
        let (p, data) = setup();
        let layout = Layout::new(8).unwrap();
        let seq = encode_instance(&data[0]).unwrap();
        let cache = forward(&p, seq.prompt(), None).unwrap();
        let none = RegisterConfig { threshold: 1.01, ..Default::default() };
        assert!(detect_register_positions(&cache, 0, &layout, &none).is_empty());
        let all = RegisterConfig { threshold: 0.0, ..Default::default() };
        let hits = attention_criterion(&cache, 0, &layout, &all);
        assert_eq!(hits.len(), layout.edge_region_len());
        let regs = detect_register_positions(&cache, 0, &layout, &all);
        assert!(regs.iter().all(|r| is_register_candidate(&layout, r.position)));
        assert_eq!(regs.len(), 2 * layout.n_edges());
    }

    #[test]
    fn ratios_sum_to_at_most_one_and_filtering_concentrates() {
        let (p, data) = setup();
        let stats = subgoal_statistics(&p, &data, &RegisterConfig { threshold: 0.1, ..Default::default() }).unwrap();
        for (st, f) in stats.positions.iter().zip(&stats.filtered) {
            assert!(st.ratios().iter().sum::<f64>() <= 1.0 + 1e-12);
            assert!(f.n_trees <= st.n_trees);
            if let Some(v) = st.preferred() {
                // every filtered tree has v as a non-leaf occurring earlier
                if f.n_trees > 0 {
                    assert!(f.counts[v] <= f.n_trees);
                }
            }
        }
    }
}
