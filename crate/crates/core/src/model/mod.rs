//! Decoder-only transformer: configuration, parameters, forward pass with
//! intervention hooks, hand-written backward pass, AdamW, training and
//! greedy decoding.

mod backward;
mod config;
mod decode;
mod forward;
pub mod gradcheck;
mod intervene;
mod optim;
mod params;
mod scalar;
mod train;

pub use backward::{backward_pass, batch_loss, loss_and_grad, Batch, LossAndGrad};
pub use config::{ModelConfig, Norm};
pub use decode::{evaluate_exact_match, greedy_decode, greedy_decode_batch, layout_of, Decoded, EvalReport};
pub use forward::{
    argmax, forward, forward_batch, gelu, layer_norm, log_softmax, residual_decomposition_error, sequence_loss,
    ActivationCache, LayerCache, NormCache, LN_EPS,
};
pub use intervene::{Action, ActionKind, InterventionSpec, Site};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use params::{BlockParams, NormParams, Parameters, TensorKind, TensorMut, TensorRef};
pub use scalar::Float;
pub use train::{train, EpochMetrics, LrSchedule, TrainConfig, TrainOutcome};
