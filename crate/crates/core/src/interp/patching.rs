use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use super::registers::{detect_register_positions, RegisterConfig};
use super::layout_for;
use crate::model::{forward, forward_batch, Action, ActionKind, InterventionSpec, Parameters, Site};
use crate::stats::{mean_ci, MeanCi};
use crate::task::{derive_seed, encode_instance, generate_instance, EdgeOrder, TaskInstance, Vocabulary};
use crate::{Error, Result};

/// `Logit(r) − Logit(r′)`.
pub fn logit_difference(logits: ArrayView1<'_, f32>, r: u32, r_prime: u32) -> f64 {
    logits[r as usize] as f64 - logits[r_prime as usize] as f64
}

/// Activations to copy from the corrupt run into the clean run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSite {
    pub layer: usize,
    pub site: Site,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchOutcome {
    /// Logit difference on the unpatched clean input.
    pub baseline: f64,
    pub patched: f64,
    /// `patched − baseline`
    pub effect: f64,
}

/// Runs `clean` with the listed activations taken from a run on `corrupt`
/// and reports the logit difference at the final position.
pub fn activation_patch(
    params: &Parameters<f32>,
    clean: &[u32],
    corrupt: &[u32],
    sites: &[PatchSite],
    r: u32,
    r_prime: u32,
) -> Result<PatchOutcome> {
    if r == r_prime {
        return Err(Error::invalid("r and r′ must be different tokens"));
    }
    if clean.len() != corrupt.len() {
        return Err(Error::invalid("clean and corrupt inputs differ in length"));
    }
    let donor = forward(params, corrupt, None)?;
    let mut spec = InterventionSpec::new();
    for s in sites {
        let values = donor.gather(s.layer, s.site, 0, &s.positions)?;
        spec = spec.replace(s.layer, s.site, s.positions.clone(), values);
    }
    let last = clean.len() - 1;
    let baseline = logit_difference(forward(params, clean, None)?.logits_at(0, last), r, r_prime);
    let patched = logit_difference(forward(params, clean, Some(&spec))?.logits_at(0, last), r, r_prime);
    Ok(PatchOutcome { baseline, patched, effect: patched - baseline })
}

/// Block and site holding stream `x^s` (0 = embedding, else block `s−1`'s
/// output).
pub fn stream_site(stream: usize) -> (usize, Site) {
    match stream {
        0 => (0, Site::ResidPre),
        s => (s - 1, Site::ResidPost),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterPatchConfig {
    pub runs: usize,
    pub samples: usize,
    /// Path depths (root-to-goal edges) to evaluate.
    pub depths: Vec<usize>,
    /// Residual stream to patch at the register positions.
    pub stream: usize,
    pub registers: RegisterConfig,
    pub seed: u64,
    /// Rejection-sampling budget per depth, as a multiple of the number of
    /// trees needed.
    pub attempts_per_tree: usize,
}

impl RegisterPatchConfig {
    pub fn for_model(params: &Parameters<f32>) -> Result<Self> {
        let n_nodes = layout_for(params)?.n_nodes;
        Ok(RegisterPatchConfig {
            runs: 10,
            samples: 1000,
            depths: (1..n_nodes).collect(),
            stream: 4.min(params.config.n_layers),
            registers: RegisterConfig::default(),
            seed: 0,
            attempts_per_tree: 2000,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEffect {
    pub depth: usize,
    /// Mean effect of each run.
    pub run_means: Vec<f64>,
    /// 95% normal-approximation interval over run means.
    pub ci: MeanCi,
    pub samples_per_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterPatchReport {
    pub stream: usize,
    pub depths: Vec<DepthEffect>,
    /// Depths left out, with the reason.
    pub omitted: Vec<(usize, String)>,
}

/// Trees in the experiment's class: the goal is `depth` edges below the
/// root and the root has two children, so the first step is a real choice.
fn in_class(inst: &TaskInstance, depth: usize) -> bool {
    inst.path_len() == depth && inst.tree.children(inst.root()).len() == 2
}

fn sample_class(n_nodes: usize, depth: usize, count: usize, seed: u64, budget: usize) -> Result<Option<Vec<TaskInstance>>> {
    let mut out = Vec::with_capacity(count);
    for attempt in 0..budget as u64 {
        let inst = generate_instance(derive_seed(seed, attempt), n_nodes, EdgeOrder::Shuffled)?;
        if in_class(&inst, depth) {
            out.push(inst);
            if out.len() == count {
                return Ok(Some(out));
            }
        }
    }
    Ok(None)
}

/// Per-sample effects of patching the clean run's register positions at
/// the configured stream with activations from the paired corrupt tree.
/// The logit difference compares the correct first step with the root's
/// other child.
pub fn register_patch_effects(
    params: &Parameters<f32>,
    pairs: &[(TaskInstance, TaskInstance)],
    stream: usize,
    registers: &RegisterConfig,
) -> Result<Vec<f64>> {
    let layout = layout_for(params)?;
    let (layer, site) = stream_site(stream);
    let mut effects = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(super::ANALYSIS_BATCH) {
        let clean: Vec<Vec<u32>> =
            chunk.iter().map(|(c, _)| encode_instance(c).map(|s| s.prompt().to_vec())).collect::<Result<_>>()?;
        let corrupt: Vec<Vec<u32>> =
            chunk.iter().map(|(_, c)| encode_instance(c).map(|s| s.prompt().to_vec())).collect::<Result<_>>()?;
        let cref: Vec<&[u32]> = clean.iter().map(|s| s.as_slice()).collect();
        let dref: Vec<&[u32]> = corrupt.iter().map(|s| s.as_slice()).collect();
        let base = forward_batch(params, &cref, None)?;
        let donor = forward_batch(params, &dref, None)?;
        let mut spec = InterventionSpec::new();
        for b in 0..chunk.len() {
            let positions: Vec<usize> = detect_register_positions(&base, b, &layout, registers)
                .into_iter()
                .map(|r| r.position)
                .collect();
            if positions.is_empty() {
                continue;
            }
            spec.push(Action {
                layer,
                site,
                kind: ActionKind::Replace(donor.gather(layer, site, b, &positions)?),
                positions,
                batch_index: Some(b),
            });
        }
        let patched = forward_batch(params, &cref, Some(&spec))?;
        let last = base.seq_len - 1;
        for (b, (inst, _)) in chunk.iter().enumerate() {
            let r = inst.path[1];
            let other = *inst.tree.children(inst.root()).iter().find(|&&c| c != r).expect("two children");
            let (r, rp) = (Vocabulary::source(r), Vocabulary::source(other));
            effects.push(
                logit_difference(patched.logits_at(b, last), r, rp) - logit_difference(base.logits_at(b, last), r, rp),
            );
        }
    }
    Ok(effects)
}

/// Resampling ablation of register positions, stratified by path depth:
/// `runs × samples` clean/corrupt pairs per depth, with a 95% interval over
/// the per-run mean effects.
pub fn register_patch_experiment(params: &Parameters<f32>, config: &RegisterPatchConfig) -> Result<RegisterPatchReport> {
    if config.stream > params.config.n_layers {
        return Err(Error::invalid(format!("stream {} out of range", config.stream)));
    }
    if config.runs == 0 || config.samples == 0 {
        return Err(Error::invalid("runs and samples must be positive"));
    }
    let n_nodes = layout_for(params)?.n_nodes;
    let mut report = RegisterPatchReport { stream: config.stream, depths: Vec::new(), omitted: Vec::new() };
    for &depth in &config.depths {
        if depth == 0 || depth >= n_nodes {
            report.omitted.push((depth, "depth impossible for this tree size".into()));
            continue;
        }
        let need = 2 * config.runs * config.samples;
        let seed = derive_seed(config.seed, depth as u64);
        let Some(trees) = sample_class(n_nodes, depth, need, seed, need.saturating_mul(config.attempts_per_tree))? else {
            report.omitted.push((depth, format!("fewer than {need} trees found within the sampling budget")));
            continue;
        };
        let mut it = trees.into_iter();
        let pairs: Vec<(TaskInstance, TaskInstance)> =
            std::iter::from_fn(|| Some((it.next()?, it.next()?))).collect();
        let effects = register_patch_effects(params, &pairs, config.stream, &config.registers)?;
        let run_means: Vec<f64> = effects
            .chunks(config.samples)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        report.depths.push(DepthEffect {
            depth,
            ci: mean_ci(&run_means, 0.95),
            run_means,
            samples_per_run: config.samples,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Norm};
    use crate::task::{build_dataset, DatasetConfig};
    use ndarray::array;

    fn model() -> Parameters<f32> {
        let cfg = ModelConfig { context_len: 31, init_scale: 0.3, ..ModelConfig::tiny(3, 16, Norm::None) };
        Parameters::init(&cfg).unwrap()
    }

    #[test]
    fn logit_difference_arithmetic() {
        let l = array![0.0f32, 2.0, 0.5];
        assert_eq!(logit_difference(l.view(), 1, 2), 1.5);
    }

    #[test]
    fn self_patch_has_no_effect() {
        let p = model();
        let d = build_dataset(&DatasetConfig { seed: 1, count: 3, n_nodes: 8, order: EdgeOrder::Shuffled }, None).unwrap();
        let seq = encode_instance(&d[0]).unwrap();
        let prompt = seq.prompt();
        let all: Vec<usize> = (0..prompt.len()).collect();
        let sites: Vec<PatchSite> = (0..3)
            .flat_map(|l| {
                [Site::ResidPre, Site::AttnOut, Site::MlpOut, Site::ResidPost]
                    .map(|site| PatchSite { layer: l, site, positions: all.clone() })
            })
            .collect();
        let o = activation_patch(&p, prompt, prompt, &sites, 1, 2).unwrap();
        assert!(o.effect.abs() <= 1e-6);
        assert!(activation_patch(&p, prompt, prompt, &sites, 3, 3).is_err());
    }

    #[test]
    fn swapping_the_compared_tokens_negates_the_effect() {
        let p = model();
        let d = build_dataset(&DatasetConfig { seed: 2, count: 2, n_nodes: 8, order: EdgeOrder::Shuffled }, None).unwrap();
        let (a, b) = (encode_instance(&d[0]).unwrap(), encode_instance(&d[1]).unwrap());
        let sites = [PatchSite { layer: 1, site: Site::ResidPost, positions: vec![2, 5, 8] }];
        let x = activation_patch(&p, a.prompt(), b.prompt(), &sites, 4, 6).unwrap();
        let y = activation_patch(&p, a.prompt(), b.prompt(), &sites, 6, 4).unwrap();
        assert_eq!(x.effect, -y.effect);
    }

    #[test]
    fn experiment_reports_each_feasible_depth() {
        let p = model();
        let cfg = RegisterPatchConfig {
            runs: 3,
            samples: 4,
            depths: vec![0, 2, 3],
            stream: 2,
            registers: RegisterConfig { threshold: 0.0, layer: 0 },
            seed: 5,
            attempts_per_tree: 500,
        };
        let rep = register_patch_experiment(&p, &cfg).unwrap();
        assert_eq!(rep.depths.iter().map(|d| d.depth).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(rep.omitted.len(), 1);
        assert!(rep.depths.iter().all(|d| d.run_means.len() == 3 && d.ci.lo <= d.ci.hi));
    }
}
