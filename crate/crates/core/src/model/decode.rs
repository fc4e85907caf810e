use serde::{Deserialize, Serialize};

use super::{argmax, forward_batch, Float, Parameters};
use crate::task::{encode_instance, Layout, NodeId, TaskInstance, Token, Vocabulary};
use crate::Result;

/// Greedy continuation of one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decoded {
    /// Every token generated after the prompt.
    pub generated: Vec<u32>,
    /// The decoded node path, starting with the prompt's final node.
    pub path: Vec<NodeId>,
    /// A generated token was not a source-form node.
    pub malformed: bool,
}

/// Decodes a batch of prompts of equal length. Generation stops per prompt
/// once the goal's source token is produced or the context is full.
pub fn greedy_decode_batch<T: Float>(
    params: &Parameters<T>,
    prompts: &[&[u32]],
    goals: &[NodeId],
) -> Result<Vec<Decoded>> {
    let ctx = params.config.context_len;
    let mut seqs: Vec<Vec<u32>> = prompts.iter().map(|p| p.to_vec()).collect();
    let mut done: Vec<bool> = seqs.iter().map(|s| s.len() >= ctx).collect();
    let start = seqs.first().map_or(0, |s| s.len());
    while !done.iter().all(|&d| d) {
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let cache = forward_batch(params, &refs, None)?;
        let last = cache.seq_len - 1;
        for (b, seq) in seqs.iter_mut().enumerate() {
            // finished rows keep padding so the batch stays rectangular
            let next = if done[b] {
                Vocabulary::PAD
            } else {
                argmax(cache.logits_at(b, last)) as u32
            };
            seq.push(next);
            if !done[b] && (next == Vocabulary::source(goals[b]) || seq.len() >= ctx) {
                done[b] = true;
            }
        }
        if seqs[0].len() >= ctx {
            break;
        }
    }
    Ok(seqs
        .into_iter()
        .zip(prompts)
        .map(|(seq, prompt)| {
            let mut generated: Vec<u32> = seq[start..].to_vec();
            if let Some(end) = generated.iter().position(|&t| t == Vocabulary::PAD) {
                generated.truncate(end);
            }
            let mut path = vec![prompt.last().and_then(|&t| Vocabulary::node_of(t)).unwrap_or(0)];
            let mut malformed = false;
            for &t in &generated {
                match Vocabulary::token(t) {
                    Some(Token::Source(n)) => path.push(n),
                    _ => malformed = true,
                }
            }
            Decoded { generated, path, malformed }
        })
        .collect())
}

pub fn greedy_decode<T: Float>(params: &Parameters<T>, prompt: &[u32], goal: NodeId) -> Result<Decoded> {
    Ok(greedy_decode_batch(params, &[prompt], &[goal])?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    pub malformed: usize,
    pub accuracy: f64,
    /// Exact-match accuracy keyed by path length in edges.
    pub by_path_len: Vec<(usize, usize, usize)>,
}

/// Whole-path exact match under greedy decoding.
pub fn evaluate_exact_match<T: Float>(
    params: &Parameters<T>,
    instances: &[TaskInstance],
    batch_size: usize,
) -> Result<EvalReport> {
    let mut correct = 0;
    let mut malformed = 0;
    let mut by_len = std::collections::BTreeMap::<usize, (usize, usize)>::new();
    for chunk in instances.chunks(batch_size.max(1)) {
        let seqs = chunk.iter().map(encode_instance).collect::<Result<Vec<_>>>()?;
        let prompts: Vec<&[u32]> = seqs.iter().map(|s| s.prompt()).collect();
        let goals: Vec<NodeId> = chunk.iter().map(|i| i.goal).collect();
        let out = greedy_decode_batch(params, &prompts, &goals)?;
        for (inst, d) in chunk.iter().zip(out) {
            let ok = d.path == inst.path;
            correct += ok as usize;
            malformed += d.malformed as usize;
            let e = by_len.entry(inst.path_len()).or_default();
            e.0 += 1;
            e.1 += ok as usize;
        }
    }
    let n = instances.len();
    Ok(EvalReport {
        n,
        correct,
        malformed,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        by_path_len: by_len.into_iter().map(|(k, (t, c))| (k, t, c)).collect(),
    })
}

/// Layout implied by a model's context length.
pub fn layout_of<T>(params: &Parameters<T>) -> Result<Layout> {
    Layout::from_context_len(params.config.context_len)
}
