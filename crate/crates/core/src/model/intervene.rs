use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Float;
use crate::{Error, Result};

/// Where in a block an intervention acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    /// Residual stream entering the block.
    ResidPre,
    /// Residual stream leaving the block.
    ResidPost,
    /// Attention head output (after `W_O` and its bias).
    AttnOut,
    /// Pre-softmax attention scores; only score blocking is allowed here.
    AttnScores,
    MlpOut,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionKind<T> {
    /// Overwrite the activation; row `i` is written at `positions[i]`.
    Replace(Array2<T>),
    /// Add to the activation; row `i` is added at `positions[i]`.
    Add(Array2<T>),
    /// Force the scores from each query in `positions` to these keys to −∞.
    BlockScores { keys: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action<T> {
    pub layer: usize,
    pub site: Site,
    pub positions: Vec<usize>,
    pub kind: ActionKind<T>,
    /// Restrict to one sequence of a batch; `None` applies to all.
    pub batch_index: Option<usize>,
}

/// A declarative list of edits applied during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec<T> {
    pub actions: Vec<Action<T>>,
}

impl<T> Default for InterventionSpec<T> {
    fn default() -> Self {
        InterventionSpec { actions: Vec::new() }
    }
}

impl<T: Float> InterventionSpec<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn replace(mut self, layer: usize, site: Site, positions: Vec<usize>, values: Array2<T>) -> Self {
        self.actions.push(Action {
            layer,
            site,
            positions,
            kind: ActionKind::Replace(values),
            batch_index: None,
        });
        self
    }

    pub fn add(mut self, layer: usize, site: Site, positions: Vec<usize>, values: Array2<T>) -> Self {
        self.actions.push(Action {
            layer,
            site,
            positions,
            kind: ActionKind::Add(values),
            batch_index: None,
        });
        self
    }

    pub fn block_scores(mut self, layer: usize, queries: Vec<usize>, keys: Vec<usize>) -> Self {
        self.actions.push(Action {
            layer,
            site: Site::AttnScores,
            positions: queries,
            kind: ActionKind::BlockScores { keys },
            batch_index: None,
        });
        self
    }

    pub fn push(&mut self, action: Action<T>) {
        self.actions.push(action);
    }

    /// Checks every action against the model shape and sequence length.
    pub fn validate(&self, n_layers: usize, seq_len: usize, batch: usize, d_model: usize) -> Result<()> {
        for (i, a) in self.actions.iter().enumerate() {
            let ctx = |m: String| Error::invalid(format!("intervention {i}: {m}"));
            if a.layer >= n_layers {
                return Err(ctx(format!("layer {} out of range (model has {n_layers})", a.layer)));
            }
            if let Some(&p) = a.positions.iter().find(|&&p| p >= seq_len) {
                return Err(ctx(format!("position {p} outside sequence of length {seq_len}")));
            }
            if let Some(b) = a.batch_index {
                if b >= batch {
                    return Err(ctx(format!("batch index {b} out of range")));
                }
            }
            match (&a.kind, a.site) {
                (ActionKind::BlockScores { keys }, Site::AttnScores) => {
                    if let Some(&k) = keys.iter().find(|&&k| k >= seq_len) {
                        return Err(ctx(format!("key {k} outside sequence")));
                    }
                }
                (ActionKind::BlockScores { .. }, _) => {
                    return Err(ctx("score blocking is only valid on the attn-scores site".into()))
                }
                (_, Site::AttnScores) => {
                    return Err(ctx("attn-scores only supports score blocking".into()))
                }
                (ActionKind::Replace(v) | ActionKind::Add(v), _) => {
                    if v.nrows() != a.positions.len() || v.ncols() != d_model {
                        return Err(ctx(format!(
                            "values have shape {:?}, expected [{}, {d_model}]",
                            v.shape(),
                            a.positions.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn at(&self, layer: usize, site: Site) -> impl Iterator<Item = &Action<T>> {
        self.actions
            .iter()
            .filter(move |a| a.layer == layer && a.site == site)
    }
}
