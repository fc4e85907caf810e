use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{loss_and_grad, Batch};
use super::decode::evaluate_exact_match;
use super::optim::{adamw_step, AdamWConfig, OptimState};
use super::Parameters;
use crate::task::{encode_instance, TaskInstance, TokenSequence};
use crate::{Error, Result};

/// Learning-rate multiplier over the planned optimizer steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to `min_factor` times it.
    Cosine { min_factor: f64 },
}

impl LrSchedule {
    /// Multiplier for the update numbered `step` (0-based) of `total`.
    pub fn factor(self, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { min_factor } => {
                let t = (step as f64 / total.max(1) as f64).min(1.0);
                min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Upper bound on passes over the training set.
    pub max_epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub optim: AdamWConfig,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Stop after this many evaluations without a validation improvement.
    pub patience: usize,
    /// Stop as soon as validation exact match reaches this value.
    pub target_accuracy: Option<f64>,
    /// Evaluate every this many epochs.
    pub eval_every: usize,
    /// Cap on validation instances used per evaluation.
    pub eval_limit: usize,
    /// Seed for the per-epoch shuffles.
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 50,
            max_steps: None,
            optim: AdamWConfig::default(),
            schedule: LrSchedule::Constant,
            patience: 5,
            target_accuracy: None,
            eval_every: 1,
            eval_limit: 1000,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy seen (or the final
    /// ones when no validation set was given).
    pub params: Parameters<f32>,
    pub best_accuracy: Option<f64>,
    pub best_step: u64,
    pub steps: u64,
    pub history: Vec<EpochMetrics>,
}

fn batches<'a>(
    seqs: &'a [TokenSequence],
    order: &'a [usize],
    size: usize,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    order.chunks(size).map(move |idx| {
        let refs: Vec<&TokenSequence> = idx.iter().map(|&i| &seqs[i]).collect();
        Batch::from_sequences(&refs)
    })
}

/// Minibatch AdamW on the masked path loss. Given identical inputs the
/// resulting parameters are identical bit for bit.
pub fn train(
    init: Parameters<f32>,
    train_set: &[TaskInstance],
    val_set: &[TaskInstance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let seqs = train_set.iter().map(encode_instance).collect::<Result<Vec<_>>>()?;
    if let Some(s) = seqs.iter().find(|s| s.len() != init.config.context_len) {
        return Err(Error::invalid(format!(
            "sequence length {} does not match model context {}",
            s.len(),
            init.config.context_len
        )));
    }
    let val = &val_set[..val_set.len().min(config.eval_limit)];
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut params = init;
    let mut state = OptimState::new(&params, config.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, Parameters<f32>, u64)> = None;
    let mut since_best = 0;
    let clock = std::time::Instant::now();
    let per_epoch = seqs.len().div_ceil(config.batch_size) as u64;
    let planned = (per_epoch * config.max_epochs as u64).min(config.max_steps.unwrap_or(u64::MAX));

    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in batches(&seqs, &order, config.batch_size) {
            let batch = batch?;
            let lg = loss_and_grad(&params, &batch).map_err(|e| Error::TrainingFailure {
                step: state.step,
                message: e.to_string(),
                last_good: Some(Box::new(params.clone())),
            })?;
            let last_good = params.clone();
            state.config.lr = config.optim.lr * config.schedule.factor(state.step, planned);
            adamw_step(&mut params, &lg.grads, &mut state);
            if !params.is_finite() {
                return Err(Error::TrainingFailure {
                    step: state.step,
                    message: "parameters became non-finite".into(),
                    last_good: Some(Box::new(last_good)),
                });
            }
            loss_sum += lg.loss as f64;
            n_batches += 1;
            if config.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
        }

        let evaluate = !val.is_empty() && (epoch % config.eval_every.max(1) == 0 || epoch == config.max_epochs);
        let val_accuracy = if evaluate {
            Some(evaluate_exact_match(&params, val, 256)?.accuracy)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            step: state.step,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_accuracy,
            seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
        if let Some(dir) = &config.checkpoint_dir {
            params.save(&dir.join("last.ckpt"), state.step)?;
        }

        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|b| acc > b.0) {
                if let Some(dir) = &config.checkpoint_dir {
                    params.save(&dir.join("best.ckpt"), state.step)?;
                }
                best = Some((acc, params.clone(), state.step));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if config.target_accuracy.is_some_and(|t| acc >= t) || since_best >= config.patience {
                break 'epochs;
            }
        }
        if config.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
    }

    let steps = state.step;
    Ok(match best {
        Some((acc, p, s)) => TrainOutcome { params: p, best_accuracy: Some(acc), best_step: s, steps, history },
        None => TrainOutcome { params, best_accuracy: None, best_step: steps, steps, history },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Norm};
    use crate::task::{build_dataset, DatasetConfig, EdgeOrder};

    fn data(n: usize, seed: u64) -> Vec<TaskInstance> {
        build_dataset(&DatasetConfig { seed, count: n, n_nodes: 4, order: EdgeOrder::Shuffled }, None).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig { init_scale: 0.05, ..ModelConfig::tiny(2, 16, Norm::None) }
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let cfg = TrainConfig { max_epochs: 3, batch_size: 16, optim: AdamWConfig { lr: 3e-3, ..Default::default() }, ..Default::default() };
        let run = || {
            let p = Parameters::<f32>::init(&small()).unwrap();
            train(p, &data(128, 1), &data(32, 2), &cfg, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history.iter().map(|m| EpochMetrics { seconds: a.history[m.epoch - 1].seconds, ..m.clone() }).collect::<Vec<_>>());
        assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    }

    #[test]
    fn divergence_reports_last_good_parameters() {
        let cfg = TrainConfig { max_epochs: 1, batch_size: 8, ..Default::default() };
        let mut p = Parameters::<f32>::init(&small()).unwrap();
        p.embed[[0, 0]] = f32::NAN;
        match train(p, &data(16, 3), &[], &cfg, |_| {}) {
            Err(Error::TrainingFailure { last_good, .. }) => assert!(last_good.is_some()),
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = LrSchedule::Cosine { min_factor: 0.1 };
        assert_eq!(c.factor(0, 100), 1.0);
        assert!((c.factor(50, 100) - 0.55).abs() < 1e-12);
        assert!((c.factor(100, 100) - 0.1).abs() < 1e-12);
        assert!((c.factor(500, 100) - 0.1).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
    }

    #[test]
    fn mismatched_context_rejected() {
        let p = Parameters::<f32>::init(&ModelConfig::reduced()).unwrap();
        assert!(train(p, &data(4, 1), &[], &TrainConfig::default(), |_| {}).is_err());
    }
}
