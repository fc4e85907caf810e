use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::backward::{batch_loss, loss_and_grad, Batch};
use super::{ModelConfig, Parameters};
use crate::task::{build_dataset, encode_instance, DatasetConfig, EdgeOrder, Layout};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct CoordError {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Worst coordinates first.
    pub worst: Vec<CoordError>,
}

/// Denominator floor for relative errors: below this magnitude the check
/// is effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// |a − n| / max(|a|, |n|, floor)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// A small batch of n-node instances that fits the config's context.
pub fn check_batch(config: &ModelConfig, size: usize, seed: u64) -> Result<Batch> {
    let n_nodes = Layout::from_context_len(config.context_len)?.n_nodes;
    let data = build_dataset(
        &DatasetConfig { seed, count: size, n_nodes, order: EdgeOrder::Shuffled },
        None,
    )?;
    let seqs = data.iter().map(encode_instance).collect::<Result<Vec<_>>>()?;
    Batch::from_sequences(&seqs.iter().collect::<Vec<_>>())
}

/// Compares analytic gradients against central finite differences on
/// `n_coords` randomly chosen coordinates, in double precision.
pub fn check_gradients_on(
    params: &Parameters<f64>,
    batch: &Batch,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = loss_and_grad(params, batch)?.grads;
    let sizes: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.data.len()))
        .collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, n_coords.min(total)).into_vec();
    picks.sort_unstable();

    let mut probe = params.clone();
    let mut errors = Vec::with_capacity(picks.len());
    for flat in picks {
        let (mut t, mut idx) = (0, flat);
        while idx >= sizes[t].1 {
            idx -= sizes[t].1;
            t += 1;
        }
        let orig = params.tensors()[t].data[idx];
        probe.tensors_mut()[t].data[idx] = orig + FD_STEP;
        let plus = batch_loss(&probe, batch)?;
        probe.tensors_mut()[t].data[idx] = orig - FD_STEP;
        let minus = batch_loss(&probe, batch)?;
        probe.tensors_mut()[t].data[idx] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.tensors()[t].data[idx];
        errors.push(CoordError {
            tensor: sizes[t].0.clone(),
            index: idx,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    errors.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    Ok(GradCheckReport {
        max_rel_err: errors.first().map_or(0.0, |e| e.rel_err),
        checked: errors.len(),
        worst: errors.into_iter().take(10).collect(),
    })
}

/// Builds a small model from `config`, runs the finite-difference check,
/// and fails with the worst coordinates when `tolerance` is exceeded.
pub fn check_gradients(config: &ModelConfig, n_coords: usize, tolerance: f64) -> Result<GradCheckReport> {
    if config.n_layers > 2 || config.d_model > 16 {
        return Err(Error::precondition("gradient checks are limited to ≤ 2 layers and d ≤ 16"));
    }
    let params = Parameters::<f64>::init(config)?;
    let batch = check_batch(config, 3, config.seed)?;
    let report = check_gradients_on(&params, &batch, n_coords, config.seed ^ 0x5eed)?;
    if report.max_rel_err > tolerance {
        let worst = report
            .worst
            .iter()
            .take(3)
            .map(|e| format!("{}[{}] a={:.6e} n={:.6e}", e.tensor, e.index, e.analytic, e.numeric))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Verification { max_rel_err: report.max_rel_err, tolerance, worst });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Norm;

    #[test]
    fn analytic_matches_finite_differences() {
        for norm in [Norm::None, Norm::PreLn] {
            let cfg = ModelConfig::tiny(2, 8, norm);
            let r = check_gradients(&cfg, 200, 1e-4).unwrap();
            assert_eq!(r.checked, 200);
            assert!(r.max_rel_err <= 1e-4, "{norm:?}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn unused_embedding_rows_have_zero_gradient() {
        let cfg = ModelConfig::tiny(2, 8, Norm::None);
        let params = Parameters::<f64>::init(&cfg).unwrap();
        let batch = check_batch(&cfg, 2, 1).unwrap();
        let used: std::collections::HashSet<u32> = batch.tokens.iter().flatten().copied().collect();
        let unused = (0..35u32).find(|t| !used.contains(t)).unwrap();
        let g = loss_and_grad(&params, &batch).unwrap().grads;
        assert!(g.embed.row(unused as usize).iter().all(|&x| x == 0.0));
        let mut probe = params.clone();
        probe.embed[[unused as usize, 0]] += FD_STEP;
        assert_eq!(batch_loss(&probe, &batch).unwrap(), batch_loss(&params, &batch).unwrap());
    }

    #[test]
    fn oversized_config_rejected() {
        assert!(check_gradients(&ModelConfig::tiny(3, 8, Norm::None), 10, 1e-4).is_err());
    }
}
