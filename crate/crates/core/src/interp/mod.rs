//! Analysis tooling for trained models: activation tables, linear probes,
//! register-token detection, activation patching, causal scrubbing,
//! attention knockout, QK circuit matrices, direct logit attribution and
//! skip lenses.
//!
//! Layer numbering follows the model: blocks are 0-based, and stream `x^ℓ`
//! is the residual after `ℓ` blocks (so `x^0` is the embedding).

pub mod activations;
pub mod circuits;
pub mod dla;
pub mod knockout;
pub mod labels;
pub mod lens;
pub mod patching;
pub mod probe;
pub mod registers;
pub mod scrub;

pub use activations::{collect_activations, ActivationRow, ActivationTable, PositionSelector};
pub use circuits::{qk_circuit_m0, qk_circuit_m1, subgoal_matrix_rp, CircuitMatrices};
pub use dla::{direct_logit_attribution, DlaTable};
pub use knockout::{attention_knockout, default_knockout_pairs, knockout_experiment, KnockoutSummary};
pub use labels::{build_probe_labels, Label, LabelKind, LabeledExample};
pub use lens::{apply_skip_lens, train_skip_lens, LensReadout, SkipLens};
pub use patching::{
    activation_patch, logit_difference, register_patch_experiment, PatchOutcome, PatchSite, RegisterPatchConfig,
    RegisterPatchReport,
};
pub use probe::{run_probe, train_linear_probe, FitOptions, LinearModel, ProbeReport, ProbeSpec};
pub use registers::{detect_register_positions, subgoal_statistics, Register, RegisterConfig, SubgoalStats};
pub use scrub::{causal_scrub, l_cs, ScrubHypothesis, ScrubReport};

use crate::model::{forward_batch, ActivationCache, Parameters};
use crate::task::{encode_instance, Layout, TaskInstance, TokenSequence};
use crate::Result;

/// Default batch size for analysis forward passes.
pub const ANALYSIS_BATCH: usize = 64;

/// Prompts (edge list, goal, separator and root) for a set of instances.
pub(crate) fn prompts(instances: &[TaskInstance]) -> Result<Vec<TokenSequence>> {
    instances.iter().map(encode_instance).collect()
}

/// Runs `f` on cached forward passes over `seqs`, `ANALYSIS_BATCH` at a
/// time. `f` receives the chunk offset and the cache.
pub(crate) fn for_each_cached(
    params: &Parameters<f32>,
    seqs: &[Vec<u32>],
    mut f: impl FnMut(usize, &ActivationCache<f32>) -> Result<()>,
) -> Result<()> {
    for (ci, chunk) in seqs.chunks(ANALYSIS_BATCH).enumerate() {
        let refs: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let cache = forward_batch(params, &refs, None)?;
        f(ci * ANALYSIS_BATCH, &cache)?;
    }
    Ok(())
}

pub(crate) fn layout_for(params: &Parameters<f32>) -> Result<Layout> {
    Layout::from_context_len(params.config.context_len)
}
