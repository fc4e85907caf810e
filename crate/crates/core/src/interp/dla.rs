use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::model::{ActivationCache, Parameters};
use crate::{Error, Result};

/// Attention-weighted value-path vectors `P[q, j] · (v_j W_O)` for each
/// source position `j`, in residual space. Rows beyond the query are zero.
pub fn contributions_from(pattern_row: ArrayView1<'_, f32>, values: ArrayView2<'_, f32>, w_o: ArrayView2<'_, f32>) -> Array2<f64> {
    let v = values.mapv(f64::from);
    let wo = w_o.mapv(f64::from);
    let mut out = v.dot(&wo);
    for (mut row, &p) in out.outer_iter_mut().zip(pattern_row) {
        row *= p as f64;
    }
    out
}

/// Per-source-position head output at `query` of block `layer`
/// (seq_len × d_model). Summing the rows and adding `b_O` gives the head's
/// output at that position.
pub fn head_contributions(
    params: &Parameters<f32>,
    cache: &ActivationCache<f32>,
    layer: usize,
    b: usize,
    query: usize,
) -> Array2<f64> {
    let s = cache.seq_len;
    let v = cache.layers[layer].v.slice(ndarray::s![b * s..(b + 1) * s, ..]);
    contributions_from(cache.pattern(layer, b).row(query), v, params.blocks[layer].w_o.view())
}

/// Linear map from a residual-space vector to logits at one position. With
/// a final LayerNorm its scale is frozen at the value computed on the
/// actual residual, which keeps the map linear.
struct Readout {
    unembed: Array2<f64>,
    norm: Option<(f64, Array1<f64>)>,
}

impl Readout {
    fn new(params: &Parameters<f32>, cache: &ActivationCache<f32>, b: usize, pos: usize) -> Self {
        let norm = cache.final_norm.as_ref().zip(params.final_norm.as_ref()).map(|(c, p)| {
            (c.rstd[cache.row(b, pos)] as f64, p.gain.mapv(f64::from))
        });
        Readout { unembed: params.unembed.mapv(f64::from), norm }
    }

    fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        match &self.norm {
            None => x.dot(&self.unembed),
            Some((rstd, gain)) => {
                let mean = x.sum() / x.len() as f64;
                let y = x.mapv(|v| (v - mean) * rstd) * gain;
                y.dot(&self.unembed)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DlaLayer {
    pub layer: usize,
    /// source position × vocab
    pub contributions: Array2<f64>,
    /// Logit contribution of the output bias `b_O`.
    pub bias: Array1<f64>,
    /// The head's whole logit contribution, from its actual output.
    pub total: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DlaTable {
    pub batch_index: usize,
    pub query: usize,
    pub layers: Vec<DlaLayer>,
}

impl DlaTable {
    /// Largest |Σ_j contribution_j + bias − total| over layers and logits.
    pub fn max_linearity_error(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| {
                let sum = l.contributions.sum_axis(ndarray::Axis(0)) + &l.bias;
                (&sum - &l.total).mapv(f64::abs).into_iter()
            })
            .fold(0.0, f64::max)
    }
}

/// Decomposes the logits at `query` contributed directly by the heads of
/// `layers` (default: the last two blocks) into one row per source position.
pub fn direct_logit_attribution(
    params: &Parameters<f32>,
    cache: &ActivationCache<f32>,
    b: usize,
    query: usize,
    layers: Option<&[usize]>,
) -> Result<DlaTable> {
    let n = params.config.n_layers;
    let default: Vec<usize> = (n.saturating_sub(2)..n).collect();
    let layers = layers.unwrap_or(&default);
    if let Some(&l) = layers.iter().find(|&&l| l >= n) {
        return Err(Error::invalid(format!("layer {l} out of range (model has {n})")));
    }
    if b >= cache.batch || query >= cache.seq_len {
        return Err(Error::invalid("batch index or query position outside the cache"));
    }
    let readout = Readout::new(params, cache, b, query);
    let out = layers
        .iter()
        .map(|&l| {
            let parts = head_contributions(params, cache, l, b, query);
            let mut contributions = Array2::zeros((parts.nrows(), params.config.vocab_size));
            for (mut row, part) in contributions.outer_iter_mut().zip(parts.outer_iter()) {
                row.assign(&readout.apply(part));
            }
            let b_o = params.blocks[l].b_o.mapv(f64::from);
            let actual = cache.layers[l].attn_out.row(cache.row(b, query)).mapv(f64::from);
            DlaLayer { layer: l, contributions, bias: readout.apply(b_o.view()), total: readout.apply(actual.view()) }
        })
        .collect();
    Ok(DlaTable { batch_index: b, query, layers: out })
}
