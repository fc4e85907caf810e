use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{for_each_cached, layout_for, prompts};
use crate::model::Parameters;
use crate::task::{Layout, Region, TaskInstance, TokenSequence};
use crate::{Error, Result};

/// Which positions of each instance to record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionSelector {
    All,
    EdgeSources,
    EdgeTargets,
    /// Positions holding path tokens.
    Path,
    /// Positions whose next-token prediction is scored.
    Masked,
    Explicit(Vec<usize>),
}

impl PositionSelector {
    pub fn positions(&self, layout: &Layout, seq: &TokenSequence) -> Vec<usize> {
        let n = seq.unpadded_len();
        let by_region = |r: Region| (0..n).filter(|&p| layout.region(p) == r).collect();
        match self {
            PositionSelector::All => (0..n).collect(),
            PositionSelector::EdgeSources => by_region(Region::EdgeSource),
            PositionSelector::EdgeTargets => by_region(Region::EdgeTarget),
            PositionSelector::Path => by_region(Region::Path),
            PositionSelector::Masked => (0..n).filter(|&p| seq.loss_mask[p]).collect(),
            PositionSelector::Explicit(ps) => ps.iter().copied().filter(|&p| p < n).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRow {
    pub instance: usize,
    pub stream: usize,
    pub position: usize,
    pub values: Vec<f32>,
}

/// Attention from one query in one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub instance: usize,
    pub layer: usize,
    pub query: usize,
    pub weights: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationTable {
    pub rows: Vec<ActivationRow>,
    pub patterns: Vec<PatternRow>,
}

impl ActivationTable {
    /// One JSON line per row; attention rows follow residual rows.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        for r in &self.patterns {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Residual vectors at `streams` × selected positions for every instance,
/// plus full attention rows for the same positions when `with_patterns`.
/// Instances are run on their full (unpadded) sequences.
pub fn collect_activations(
    params: &Parameters<f32>,
    instances: &[TaskInstance],
    streams: &[usize],
    selector: &PositionSelector,
    with_patterns: bool,
) -> Result<ActivationTable> {
    let n_layers = params.config.n_layers;
    if let Some(&s) = streams.iter().find(|&&s| s > n_layers) {
        return Err(Error::invalid(format!("stream {s} out of range 0..={n_layers}")));
    }
    let layout = layout_for(params)?;
    let seqs = prompts(instances)?;
    let mut table = ActivationTable::default();
    // Equal-length groups keep batching rectangular without padding.
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in seqs.iter().enumerate() {
        by_len.entry(s.unpadded_len()).or_default().push(i);
    }
    let mut rows: Vec<(usize, Vec<ActivationRow>, Vec<PatternRow>)> = Vec::new();
    for (len, idx) in by_len {
        let tokens: Vec<Vec<u32>> = idx.iter().map(|&i| seqs[i].tokens[..len].to_vec()).collect();
        for_each_cached(params, &tokens, |off, cache| {
            for b in 0..cache.batch {
                let inst = idx[off + b];
                let positions = selector.positions(&layout, &seqs[inst]);
                let mut rs = Vec::new();
                for &s in streams {
                    for &p in &positions {
                        rs.push(ActivationRow {
                            instance: inst,
                            stream: s,
                            position: p,
                            values: cache.resid_at(s, b, p).to_vec(),
                        });
                    }
                }
                let mut ps = Vec::new();
                if with_patterns {
                    for l in 0..n_layers {
                        for &p in &positions {
                            ps.push(PatternRow {
                                instance: inst,
                                layer: l,
                                query: p,
                                weights: cache.pattern(l, b).row(p).to_vec(),
                            });
                        }
                    }
                }
                rows.push((inst, rs, ps));
            }
            Ok(())
        })?;
    }
    rows.sort_by_key(|r| r.0);
    for (_, rs, ps) in rows {
        table.rows.extend(rs);
        table.patterns.extend(ps);
    }
    Ok(table)
}
