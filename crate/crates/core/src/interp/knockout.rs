use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::registers::{detect_register_positions, RegisterConfig};
use super::layout_for;
use crate::model::{forward, ActivationCache, InterventionSpec, Parameters};
use crate::task::{encode_instance, TaskInstance, Vocabulary};
use crate::{Error, Result};

/// Forward pass with the pre-softmax scores of each `(query, key)` pair
/// forced to −∞ in every listed block.
pub fn attention_knockout(
    params: &Parameters<f32>,
    tokens: &[u32],
    blocked: &[(usize, usize)],
    layers: &[usize],
) -> Result<ActivationCache<f32>> {
    if let Some(&(q, k)) = blocked.iter().find(|(q, k)| k > q) {
        return Err(Error::invalid(format!("pair ({q}, {k}) looks ahead of the query")));
    }
    let mut by_query: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(q, k) in blocked {
        by_query.entry(q).or_default().push(k);
    }
    let mut spec = InterventionSpec::new();
    for &l in layers {
        for (&q, keys) in &by_query {
            spec = spec.block_scores(l, vec![q], keys.clone());
        }
    }
    forward(params, tokens, Some(&spec))
}

/// `(query, key)` pairs to block and the blocks to block them in.
pub type KnockoutPlan = (Vec<(usize, usize)>, Vec<usize>);

/// The default knockout: the final position may not attend to any register
/// position, in the last two blocks.
pub fn default_knockout_pairs(
    params: &Parameters<f32>,
    tokens: &[u32],
    registers: &RegisterConfig,
) -> Result<KnockoutPlan> {
    let layout = layout_for(params)?;
    let cache = forward(params, tokens, None)?;
    let last = tokens.len() - 1;
    let pairs = detect_register_positions(&cache, 0, &layout, registers)
        .into_iter()
        .map(|r| (last, r.position))
        .collect();
    let n = params.config.n_layers;
    Ok((pairs, (n.saturating_sub(2)..n).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutSummary {
    pub n: usize,
    /// Instances with at least one register position to block.
    pub with_registers: usize,
    /// Instances where the correct next-token logit went down.
    pub lowered: usize,
    pub mean_delta: f64,
}

/// Applies the default knockout at the root prediction of each instance and
/// compares the correct next-node logit with the unablated run.
pub fn knockout_experiment(
    params: &Parameters<f32>,
    instances: &[TaskInstance],
    registers: &RegisterConfig,
) -> Result<KnockoutSummary> {
    let mut s = KnockoutSummary { n: 0, with_registers: 0, lowered: 0, mean_delta: 0.0 };
    let mut total = 0.0;
    for inst in instances {
        if inst.path.len() < 2 {
            continue;
        }
        let seq = encode_instance(inst)?;
        let prompt = seq.prompt();
        let target = Vocabulary::source(inst.path[1]) as usize;
        let last = prompt.len() - 1;
        let base = forward(params, prompt, None)?.logits_at(0, last)[target];
        let (pairs, layers) = default_knockout_pairs(params, prompt, registers)?;
        s.n += 1;
        if pairs.is_empty() {
            continue;
        }
        s.with_registers += 1;
        let ko = attention_knockout(params, prompt, &pairs, &layers)?.logits_at(0, last)[target];
        let delta = (ko - base) as f64;
        total += delta;
        s.lowered += (delta < 0.0) as usize;
    }
    s.mean_delta = if s.with_registers > 0 { total / s.with_registers as f64 } else { 0.0 };
    Ok(s)
}
