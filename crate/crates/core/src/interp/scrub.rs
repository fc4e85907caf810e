use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::dla::head_contributions;
use super::registers::{detect_register_positions, RegisterConfig};
use super::{layout_for, ANALYSIS_BATCH};
use crate::model::{forward_batch, log_softmax, Action, ActionKind, ActivationCache, InterventionSpec, Parameters, Site};
use crate::oracle::ancestor_at;
use crate::task::{derive_seed, encode_instance, generate_instance, EdgeOrder, Layout, Region, TaskInstance, Vocabulary};
use crate::{Error, Result};

/// `(L_scrubbed − L_random) / (L_model − L_random)`.
pub fn l_cs(l_scrubbed: f64, l_model: f64, l_random: f64) -> f64 {
    (l_scrubbed - l_random) / (l_model - l_random)
}

/// Loss of uniform logits over the vocabulary.
pub fn random_loss() -> f64 {
    (Vocabulary::SIZE as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DonorScheme {
    /// Rejection-sample fresh trees until the layer's key matches.
    Resample { max_attempts: usize },
    /// Each instance donates to itself (a sanity check: recovers exactly 1).
    SelfDonor,
}

/// Backward-chaining hypothesis: the head of block `l` writes the node `l`
/// edges above the goal into the final position, so its output there may be
/// swapped for that of any tree sharing that node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScrubHypothesis {
    /// Blocks to scrub (all by default).
    pub layers: Option<Vec<usize>>,
    /// Keep the clean contributions of edge-target and register positions
    /// through the last two heads.
    pub lookahead_constraints: bool,
    pub donors: DonorScheme,
    pub registers: RegisterConfig,
    pub seed: u64,
}

impl Default for ScrubHypothesis {
    fn default() -> Self {
        ScrubHypothesis {
            layers: None,
            lookahead_constraints: false,
            donors: DonorScheme::Resample { max_attempts: 10_000 },
            registers: RegisterConfig::default(),
            seed: 0,
        }
    }
}

/// The equivalence key of block `layer` for an instance.
pub fn scrub_key(inst: &TaskInstance, layer: usize) -> Option<usize> {
    ancestor_at(&inst.tree, inst.goal, layer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrubRow {
    pub path_len: usize,
    pub n: usize,
    pub loss_model: f64,
    pub loss_scrubbed: f64,
    pub l_cs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrubReport {
    pub l_random: f64,
    pub rows: Vec<ScrubRow>,
    /// Instances dropped because some layer found no donor.
    pub skipped: usize,
    pub lookahead_constraints: bool,
}

fn find_donor(inst: &TaskInstance, layer: usize, seed: u64, max_attempts: usize) -> Result<Option<TaskInstance>> {
    let key = scrub_key(inst, layer);
    for a in 0..max_attempts as u64 {
        let cand = generate_instance(derive_seed(seed, a), inst.n_nodes(), EdgeOrder::Shuffled)?;
        if scrub_key(&cand, layer) == key {
            return Ok(Some(cand));
        }
    }
    Ok(None)
}

/// Edge-target and register positions: the contributions the lookahead
/// constraint leaves unscrubbed.
fn preserved_positions(cache: &ActivationCache<f32>, b: usize, layout: &Layout, reg: &RegisterConfig) -> Vec<usize> {
    let mut ps: Vec<usize> = (0..layout.edge_region_len())
        .filter(|&p| layout.region(p) == Region::EdgeTarget)
        .collect();
    ps.extend(detect_register_positions(cache, b, layout, reg).into_iter().map(|r| r.position));
    ps.sort_unstable();
    ps.dedup();
    ps
}

fn sum_rows(m: &ndarray::Array2<f64>, rows: &[usize]) -> Array1<f64> {
    let mut s = Array1::zeros(m.ncols());
    for &r in rows {
        s += &m.row(r);
    }
    s
}

/// Causal scrubbing of the backward-chaining hypothesis at the first path
/// prediction (the position holding the root). Reports L_CS per true path
/// length.
pub fn causal_scrub(params: &Parameters<f32>, instances: &[TaskInstance], hyp: &ScrubHypothesis) -> Result<ScrubReport> {
    let n_layers = params.config.n_layers;
    let layers: Vec<usize> = hyp.layers.clone().unwrap_or_else(|| (0..n_layers).collect());
    if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::invalid(format!("layer {l} out of range")));
    }
    let layout = layout_for(params)?;
    let constrained: Vec<usize> = if hyp.lookahead_constraints {
        (n_layers.saturating_sub(2)..n_layers).collect()
    } else {
        Vec::new()
    };

    // (path_len, loss_model, loss_scrubbed) per kept instance
    let mut results: Vec<(usize, f64, f64)> = Vec::new();
    let mut skipped = 0;
    let mut kept: Vec<(&TaskInstance, Vec<TaskInstance>)> = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        if inst.path.len() < 2 {
            skipped += 1;
            continue;
        }
        let mut donors = Vec::with_capacity(layers.len());
        for &l in &layers {
            let d = match hyp.donors {
                DonorScheme::SelfDonor => Some(inst.clone()),
                DonorScheme::Resample { max_attempts } => {
                    find_donor(inst, l, derive_seed(derive_seed(hyp.seed, i as u64), l as u64), max_attempts)?
                }
            };
            match d {
                Some(d) => donors.push(d),
                None => break,
            }
        }
        if donors.len() == layers.len() {
            kept.push((inst, donors));
        } else {
            skipped += 1;
        }
    }

    let prompt = |inst: &TaskInstance| encode_instance(inst).map(|s| s.prompt().to_vec());
    for chunk in kept.chunks(ANALYSIS_BATCH) {
        let clean: Vec<Vec<u32>> = chunk.iter().map(|(c, _)| prompt(c)).collect::<Result<_>>()?;
        let cref: Vec<&[u32]> = clean.iter().map(|s| s.as_slice()).collect();
        let base = forward_batch(params, &cref, None)?;
        let q = base.seq_len - 1;
        let mut spec = InterventionSpec::new();
        for (li, &l) in layers.iter().enumerate() {
            let donor_toks: Vec<Vec<u32>> = chunk.iter().map(|(_, d)| prompt(&d[li])).collect::<Result<_>>()?;
            let dref: Vec<&[u32]> = donor_toks.iter().map(|s| s.as_slice()).collect();
            let donor = forward_batch(params, &dref, None)?;
            for b in 0..chunk.len() {
                let mut value = donor.layers[l].attn_out.row(donor.row(b, q)).mapv(f64::from);
                if constrained.contains(&l) {
                    let dc = head_contributions(params, &donor, l, b, q);
                    let cc = head_contributions(params, &base, l, b, q);
                    value -= &sum_rows(&dc, &preserved_positions(&donor, b, &layout, &hyp.registers));
                    value += &sum_rows(&cc, &preserved_positions(&base, b, &layout, &hyp.registers));
                }
                let row = value.mapv(|v| v as f32).insert_axis(ndarray::Axis(0));
                spec.push(Action {
                    layer: l,
                    site: Site::AttnOut,
                    positions: vec![q],
                    kind: ActionKind::Replace(row),
                    batch_index: Some(b),
                });
            }
        }
        let scrubbed = forward_batch(params, &cref, Some(&spec))?;
        for (b, (inst, _)) in chunk.iter().enumerate() {
            let target = Vocabulary::source(inst.path[1]) as usize;
            let lm = -(log_softmax(base.logits_at(b, q))[target] as f64);
            let ls = -(log_softmax(scrubbed.logits_at(b, q))[target] as f64);
            results.push((inst.path_len(), lm, ls));
        }
    }

    let l_random = random_loss();
    let mut groups: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for (len, lm, ls) in results {
        let g = groups.entry(len).or_default();
        g.0 += 1;
        g.1 += lm;
        g.2 += ls;
    }
    let rows = groups
        .into_iter()
        .map(|(path_len, (n, lm, ls))| {
            let (lm, ls) = (lm / n as f64, ls / n as f64);
            ScrubRow { path_len, n, loss_model: lm, loss_scrubbed: ls, l_cs: l_cs(ls, lm, l_random) }
        })
        .collect();
    Ok(ScrubReport { l_random, rows, skipped, lookahead_constraints: hyp.lookahead_constraints })
}
