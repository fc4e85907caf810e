use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::probe::{fit_linear, FitOptions, LinearModel, Objective};
use super::{for_each_cached, prompts};
use crate::model::{argmax, layer_norm, log_softmax, ActivationCache, Parameters};
use crate::task::{TaskInstance, Vocabulary, MAX_NODES};
use crate::{Error, Result};

/// How a skip lens turns a residual vector into logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LensKind {
    /// The model's own final norm and unembedding (nothing skipped).
    Model,
    /// A linear softmax readout fitted to the next-token targets.
    Trained(LinearModel),
}

/// Readout of `x^{L−n}`, replacing the last `n` blocks of the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipLens {
    pub skipped: usize,
    pub stream: usize,
    pub kind: LensKind,
    pub converged: bool,
    pub warning: Option<String>,
}

/// Lens predictions at one position, one entry per lens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReadout {
    pub position: usize,
    pub streams: Vec<usize>,
    /// Distribution over the 16 node tokens (renormalized source-token mass).
    pub node_probs: Vec<Vec<f64>>,
    pub argmax: Vec<usize>,
}

/// Stream rows and next-token targets at every masked position.
fn masked_features(params: &Parameters<f32>, instances: &[TaskInstance], stream: usize) -> Result<(Array2<f64>, Vec<u32>)> {
    let seqs = prompts(instances)?;
    let tokens: Vec<Vec<u32>> = seqs.iter().map(|s| s.tokens.clone()).collect();
    let mut rows: Vec<f64> = Vec::new();
    let mut targets = Vec::new();
    for_each_cached(params, &tokens, |off, cache| {
        for b in 0..cache.batch {
            let seq = &seqs[off + b];
            let next = seq.targets();
            for (p, _) in seq.loss_mask.iter().enumerate().filter(|(_, &m)| m) {
                rows.extend(cache.resid_at(stream, b, p).iter().map(|&v| v as f64));
                targets.push(next[p]);
            }
        }
        Ok(())
    })?;
    let d = params.config.d_model;
    let x = Array2::from_shape_vec((targets.len(), d), rows).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((x, targets))
}

/// Fits a skip lens on `x^{L−n}`. `n = 0` returns the model's own readout.
pub fn train_skip_lens(params: &Parameters<f32>, instances: &[TaskInstance], n: usize, opts: &FitOptions) -> Result<SkipLens> {
    let n_layers = params.config.n_layers;
    if n >= n_layers {
        return Err(Error::invalid(format!("can skip at most {} of {n_layers} blocks", n_layers - 1)));
    }
    let stream = n_layers - n;
    if n == 0 {
        return Ok(SkipLens { skipped: 0, stream, kind: LensKind::Model, converged: true, warning: None });
    }
    let (x, targets) = masked_features(params, instances, stream)?;
    if targets.is_empty() {
        return Err(Error::invalid("no masked positions to train on"));
    }
    let mut y = Array2::<f64>::zeros((targets.len(), Vocabulary::SIZE));
    for (i, &t) in targets.iter().enumerate() {
        y[[i, t as usize]] = 1.0;
    }
    let model = fit_linear(&x, &y, Objective::Softmax, opts)?;
    let converged = model.converged;
    let warning = (!converged).then(|| {
        format!("skip lens n={n} stopped after {} iterations (gradient norm {:.2e})", model.iterations, model.grad_norm)
    });
    Ok(SkipLens { skipped: n, stream, kind: LensKind::Trained(model), converged, warning })
}

/// Lens logits for every row of the cache.
pub fn lens_logits(lens: &SkipLens, params: &Parameters<f32>, cache: &ActivationCache<f32>) -> Result<Array2<f64>> {
    if lens.stream > cache.n_layers() {
        return Err(Error::invalid(format!("lens reads stream {} of a {}-block cache", lens.stream, cache.n_layers())));
    }
    let x = cache.resid(lens.stream);
    Ok(match &lens.kind {
        LensKind::Model => {
            // Same operations and shapes as the forward pass, so the result
            // matches its logits bit for bit.
            let normed = params.final_norm.as_ref().map(|p| layer_norm(x, p).out);
            let xf = normed.as_ref().unwrap_or(x);
            let mut logits = xf.dot(&params.unembed);
            for mut row in logits.rows_mut() {
                row += &params.unembed_bias;
            }
            logits.mapv(f64::from)
        }
        LensKind::Trained(m) => m.scores(&x.mapv(f64::from)),
    })
}

/// Mean next-token loss of the lens over every masked position.
pub fn lens_loss(lens: &SkipLens, params: &Parameters<f32>, instances: &[TaskInstance]) -> Result<f64> {
    let seqs = prompts(instances)?;
    let tokens: Vec<Vec<u32>> = seqs.iter().map(|s| s.tokens.clone()).collect();
    let (mut total, mut n) = (0.0, 0usize);
    for_each_cached(params, &tokens, |off, cache| {
        let logits = lens_logits(lens, params, cache)?;
        for b in 0..cache.batch {
            let seq = &seqs[off + b];
            let next = seq.targets();
            for (p, _) in seq.loss_mask.iter().enumerate().filter(|(_, &m)| m) {
                total -= log_softmax(logits.row(cache.row(b, p)))[next[p] as usize];
                n += 1;
            }
        }
        Ok(())
    })?;
    if n == 0 {
        return Err(Error::invalid("no masked positions"));
    }
    Ok(total / n as f64)
}

fn node_distribution(logits: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let lsm = log_softmax(logits);
    let mass: Array1<f64> = (0..MAX_NODES).map(|i| lsm[Vocabulary::source(i) as usize].exp()).collect();
    let z = mass.sum();
    mass.iter().map(|&m| if z > 0.0 { m / z } else { 1.0 / MAX_NODES as f64 }).collect()
}

/// Applies each lens at `position` of sequence `b`.
pub fn apply_skip_lens(
    lenses: &[SkipLens],
    params: &Parameters<f32>,
    cache: &ActivationCache<f32>,
    b: usize,
    position: usize,
) -> Result<LensReadout> {
    if b >= cache.batch || position >= cache.seq_len {
        return Err(Error::invalid(format!("no row ({b}, {position}) in the cache")));
    }
    let mut out = LensReadout { position, streams: Vec::new(), node_probs: Vec::new(), argmax: Vec::new() };
    for lens in lenses {
        let logits = lens_logits(lens, params, cache)?;
        let probs = node_distribution(logits.row(cache.row(b, position)));
        out.argmax.push(argmax(ndarray::ArrayView1::from(&probs[..])));
        out.streams.push(lens.stream);
        out.node_probs.push(probs);
    }
    Ok(out)
}
