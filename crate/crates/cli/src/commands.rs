//! One function per subcommand. Each resolves its options, runs the
//! corresponding library operation and records every file it writes.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use backchain::interp::circuits::{circuit_matrices, preferred_subgoal};
use backchain::interp::lens::lens_loss;
use backchain::interp::scrub::DonorScheme;
use backchain::interp::{
    apply_skip_lens, causal_scrub, knockout_experiment, register_patch_experiment, run_probe, subgoal_statistics,
    train_skip_lens, FitOptions, LabelKind, ProbeSpec, RegisterConfig, RegisterPatchConfig, RegisterPatchReport,
    ScrubHypothesis, ScrubReport,
};
use backchain::interp::probe::StreamConvention;
use backchain::model::{evaluate_exact_match, forward, train, LrSchedule, ModelConfig, Norm, Parameters, TrainConfig};
use backchain::task::{
    build_dataset, encode_instance, read_jsonl, write_jsonl, DatasetConfig, EdgeOrder, Layout, TaskInstance, TreeKey,
    Vocabulary,
};

use crate::config::{options, List};
use crate::export::{export_results, to_csv, LensRow, LensTable, OmittedProbe, ProbeTable, Tabular};
use crate::manifest::RunRecorder;
use crate::svg::{render_svg, CurvePoint, LensLayer, Payload, Series, SvgKind};
use crate::UsageError;

/// Shared context handed to every command.
pub struct Ctx {
    pub threads: usize,
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| UsageError(format!("--{flag} is required (flag or config file)")).into())
}

fn load_checkpoint(path: &Path, rec: &mut RunRecorder) -> Result<Parameters<f32>> {
    let (params, _) = Parameters::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    rec.checkpoint_digest(params.digest());
    Ok(params)
}

fn n_nodes_of(params: &Parameters<f32>) -> Result<usize> {
    Ok(Layout::from_context_len(params.config.context_len)?.n_nodes)
}

/// Instances from `data` if given, otherwise freshly generated and saved
/// as `instances.jsonl` in the output directory.
fn instances(
    data: Option<&Path>,
    count: usize,
    seed: u64,
    n_nodes: usize,
    rec: &mut RunRecorder,
) -> Result<Vec<TaskInstance>> {
    match data {
        Some(path) => {
            let insts = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
            if let Some(bad) = insts.iter().find(|i| i.n_nodes() != n_nodes) {
                bail!("{} has {}-node trees but the model expects {n_nodes}", path.display(), bad.n_nodes());
            }
            rec.dataset_digest(backchain::digest::sha256_file(path)?);
            Ok(insts)
        }
        None => {
            rec.seed("data", seed);
            let insts = build_dataset(&DatasetConfig { seed, count, n_nodes, order: EdgeOrder::Shuffled }, None)?;
            save_dataset(rec, "instances.jsonl", &insts)?;
            let digest = rec_digest(rec, "instances.jsonl")?;
            rec.dataset_digest(digest);
            Ok(insts)
        }
    }
}

fn save_dataset(rec: &mut RunRecorder, name: &str, insts: &[TaskInstance]) -> Result<()> {
    write_jsonl(&rec.path(name), insts)?;
    rec.record(name)
}

fn rec_digest(rec: &RunRecorder, name: &str) -> Result<String> {
    Ok(backchain::digest::sha256_file(&rec.path(name))?)
}

fn write_svg(rec: &mut RunRecorder, name: &str, payload: &Payload) -> Result<()> {
    let svg = render_svg(payload.kind(), payload)?;
    rec.write_bytes(name, svg.as_bytes())
}

options! {
    GenerateArgs => Generate {
        n_nodes: usize = "16" => "Nodes per tree",
        count: usize = "1000" => "Number of instances",
        seed: u64 = "0" => "Base seed",
        order: EdgeOrder = "shuffled" => "Edge-list order: shuffled, backward or forward",
        out: PathBuf = "dataset.jsonl" => "Output JSONL file; the manifest goes next to it",
        @optional {
            exclude: PathBuf => "JSONL dataset whose trees must not be repeated",
        }
    }
}

pub fn generate(o: Generate, ctx: &Ctx) -> Result<()> {
    let dir = o.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = o.out.file_name().and_then(|n| n.to_str()).context("--out must name a file")?.to_string();
    let stem = name.strip_suffix(".jsonl").unwrap_or(&name);
    let mut rec = RunRecorder::with_manifest_name(dir, &format!("{stem}.manifest.json"), "generate", &o, ctx.threads)?;
    rec.seed("data", o.seed);
    let exclude: Option<HashSet<TreeKey>> = match &o.exclude {
        Some(p) => Some(read_jsonl(p)?.iter().map(|i| TreeKey::of(&i.tree)).collect()),
        None => None,
    };
    let cfg = DatasetConfig { seed: o.seed, count: o.count, n_nodes: o.n_nodes, order: o.order };
    let insts = build_dataset(&cfg, exclude.as_ref())?;
    save_dataset(&mut rec, &name, &insts)?;
    let digest = rec_digest(&rec, &name)?;
    rec.dataset_digest(digest);
    rec.finish()?;
    eprintln!("wrote {} instances to {}", insts.len(), o.out.display());
    Ok(())
}

options! {
    TrainArgs => Train {
        preset: String = "reduced" => "Model preset: reduced (4 blocks, d=64), paper (6 blocks, d=128) or tiny",
        norm: Norm = "none" => "none or pre-ln",
        n_nodes: usize = "8" => "Nodes per tree",
        train_count: usize = "30000" => "Training trees",
        val_count: usize = "1000" => "Validation trees for early stopping",
        test_count: usize = "3000" => "Held-out test trees",
        seed: u64 = "0" => "Seed for data, initialization and batch order",
        epochs: usize = "50" => "Maximum epochs",
        batch_size: usize = "64" => "Batch size",
        lr: f64 = "0.001" => "AdamW learning rate",
        weight_decay: f64 = "0.01" => "AdamW decoupled weight decay",
        patience: usize = "5" => "Evaluations without improvement before stopping",
        eval_limit: usize = "1000" => "Validation trees used per evaluation",
        out: PathBuf = "runs/train" => "Output directory",
        @optional {
            n_layers: usize => "Override the preset's block count",
            d_model: usize => "Override the preset's width (head and MLP widths follow)",
            max_steps: u64 => "Stop after this many optimizer steps",
            cosine_to: f64 => "Cosine-decay the learning rate to this fraction of --lr over the planned steps [default: constant]",
            target_accuracy: f64 => "Stop once validation exact match reaches this",
            train_data: PathBuf => "Training JSONL instead of generating",
            val_data: PathBuf => "Validation JSONL instead of generating",
            test_data: PathBuf => "Test JSONL instead of generating",
        }
    }
}

pub fn model_config(o: &Train) -> Result<ModelConfig> {
    let mut cfg = match o.preset.as_str() {
        "reduced" => ModelConfig::reduced(),
        "paper" => ModelConfig::default(),
        "tiny" => ModelConfig { init_scale: 0.02, ..ModelConfig::tiny(2, 16, Norm::None) },
        other => return Err(UsageError(format!("unknown preset {other:?}")).into()),
    };
    if let Some(l) = o.n_layers {
        cfg.n_layers = l;
    }
    if let Some(d) = o.d_model {
        cfg.d_model = d;
        cfg.d_head = d;
        cfg.d_mlp = 4 * d;
    }
    cfg.norm = o.norm;
    cfg.seed = o.seed;
    cfg.context_len = Layout::new(o.n_nodes)?.context_len();
    cfg.validate()?;
    Ok(cfg)
}

#[derive(serde::Serialize)]
struct HistoryRow {
    epoch: usize,
    step: u64,
    train_loss: f64,
    val_accuracy: Option<f64>,
}

pub fn train_cmd(o: Train, ctx: &Ctx) -> Result<()> {
    let cfg = model_config(&o)?;
    let mut rec = RunRecorder::new(&o.out, "train", &o, ctx.threads)?;
    for (k, v) in [("data", o.seed), ("init", o.seed), ("batches", o.seed)] {
        rec.seed(k, v);
    }
    let gen = |seed: u64, count: usize, ex: Option<&HashSet<TreeKey>>| {
        build_dataset(&DatasetConfig { seed, count, n_nodes: o.n_nodes, order: EdgeOrder::Shuffled }, ex)
    };
    let load = |p: &Option<PathBuf>| p.as_deref().map(read_jsonl).transpose();
    let train_set = match load(&o.train_data)? {
        Some(d) => d,
        None => gen(o.seed, o.train_count, None)?,
    };
    let seen: HashSet<TreeKey> = train_set.iter().map(|i| TreeKey::of(&i.tree)).collect();
    let val_set = match load(&o.val_data)? {
        Some(d) => d,
        None => gen(o.seed.wrapping_add(1), o.val_count, Some(&seen))?,
    };
    let test_set = match load(&o.test_data)? {
        Some(d) => d,
        None => gen(o.seed.wrapping_add(2), o.test_count, Some(&seen))?,
    };
    for (name, set) in [("train.jsonl", &train_set), ("val.jsonl", &val_set), ("test.jsonl", &test_set)] {
        save_dataset(&mut rec, name, set)?;
    }
    let digest = rec_digest(&rec, "train.jsonl")?;
    rec.dataset_digest(digest);

    if o.cosine_to.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
        return Err(UsageError("--cosine-to must lie in [0, 1]".into()).into());
    }
    let mut tc = TrainConfig {
        batch_size: o.batch_size,
        max_epochs: o.epochs,
        max_steps: o.max_steps,
        patience: o.patience,
        target_accuracy: o.target_accuracy,
        eval_limit: o.eval_limit,
        seed: o.seed,
        checkpoint_dir: Some(o.out.clone()),
        schedule: o.cosine_to.map_or(LrSchedule::Constant, |min_factor| LrSchedule::Cosine { min_factor }),
        ..Default::default()
    };
    tc.optim.lr = o.lr;
    tc.optim.weight_decay = o.weight_decay;
    let outcome = train(Parameters::init(&cfg)?, &train_set, &val_set, &tc, |m| {
        eprintln!(
            "epoch {:>3} step {:>7} loss {:.5} val {} ({:.0}s)",
            m.epoch,
            m.step,
            m.train_loss,
            m.val_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            m.seconds
        );
    })?;
    for name in ["best.ckpt", "last.ckpt"] {
        if rec.path(name).exists() {
            rec.record(name)?;
        }
    }
    rec.checkpoint_digest(outcome.params.digest());
    let history: Vec<HistoryRow> = outcome
        .history
        .iter()
        .map(|m| HistoryRow { epoch: m.epoch, step: m.step, train_loss: m.train_loss, val_accuracy: m.val_accuracy })
        .collect();
    rec.write_bytes("history.csv", &to_csv(&history)?)?;
    let report = evaluate_exact_match(&outcome.params, &test_set, 256)?;
    export_results(&mut rec, "eval", &report)?;
    rec.finish()?;
    eprintln!("test exact match {:.4} ({}/{})", report.accuracy, report.correct, report.n);
    Ok(())
}

options! {
    EvalArgs => Eval {
        count: usize = "1000" => "Generated instances when --data is absent",
        seed: u64 = "1" => "Seed for generated instances",
        batch_size: usize = "256" => "Decoding batch size",
        out: PathBuf = "runs/eval" => "Output directory",
        @optional {
            checkpoint: PathBuf => "Model checkpoint (required)",
            data: PathBuf => "JSONL instances to evaluate",
        }
    }
}

pub fn eval(o: Eval, ctx: &Ctx) -> Result<()> {
    let ckpt = required(o.checkpoint.clone(), "checkpoint")?;
    let mut rec = RunRecorder::new(&o.out, "eval", &o, ctx.threads)?;
    let params = load_checkpoint(&ckpt, &mut rec)?;
    let insts = instances(o.data.as_deref(), o.count, o.seed, n_nodes_of(&params)?, &mut rec)?;
    let report = evaluate_exact_match(&params, &insts, o.batch_size)?;
    export_results(&mut rec, "eval", &report)?;
    rec.finish()?;
    eprintln!("exact match {:.4} ({}/{})", report.accuracy, report.correct, report.n);
    Ok(())
}

options! {
    ProbeArgs => Probe {
        kinds: List<LabelKind> = "edge-at-target,edge-at-source,goal-at-path,subpath-at-register,children-at-path,leaves-at-path"
            => "Probe label kinds",
        n_train: usize = "8000" => "Training instances per probe",
        n_test: usize = "8000" => "Test instances per probe",
        seed: u64 = "0" => "Seed for instances and position sampling",
        joint_edge: bool = "false" => "One 256-way head for edge probes instead of two 16-way heads",
        convention: String = "post-block" => "Stream numbering: post-block (x^l after l blocks) or pre-block",
        register_layer: usize = "0" => "Block whose attention selects register subgoals",
        threshold: f64 = "0.3" => "Register attention threshold",
        l2: f64 = "0.0001" => "L2 penalty on standardized probe weights",
        max_iter: usize = "1000" => "Probe optimizer iteration cap",
        out: PathBuf = "runs/probe" => "Output directory",
        @optional {
            checkpoint: PathBuf => "Model checkpoint (required)",
            layers: List<usize> => "Streams x^l to probe [default: all]",
            subpath_depth: usize => "Subpath label depth [default: stream - 1 - register-layer]",
        }
    }
}

fn convention(s: &str) -> Result<StreamConvention> {
    match s {
        "post-block" => Ok(StreamConvention::PostBlock),
        "pre-block" => Ok(StreamConvention::PreBlock),
        other => Err(UsageError(format!("unknown stream convention {other:?}")).into()),
    }
}

pub fn probe(o: Probe, ctx: &Ctx) -> Result<()> {
    let ckpt = required(o.checkpoint.clone(), "checkpoint")?;
    let conv = convention(&o.convention)?;
    let mut rec = RunRecorder::new(&o.out, "probe", &o, ctx.threads)?;
    rec.seed("probe", o.seed);
    let params = load_checkpoint(&ckpt, &mut rec)?;
    let layers = o.layers.clone().map_or_else(|| (0..=params.config.n_layers).collect(), |l| l.0);
    let (mut reports, mut omitted) = (Vec::new(), Vec::new());
    for &kind in &o.kinds.0 {
        for &layer in &layers {
            let spec = ProbeSpec {
                n_train: o.n_train,
                n_test: o.n_test,
                fit: FitOptions { l2: o.l2, max_iter: o.max_iter, ..Default::default() },
                seed: o.seed,
                joint_edge: o.joint_edge,
                convention: conv,
                registers: RegisterConfig { threshold: o.threshold, layer: o.register_layer },
                subpath_depth: o.subpath_depth,
                ..ProbeSpec::new(kind, layer)
            };
            let report = match run_probe(&params, &spec) {
                Ok((_, report)) => report,
                Err(backchain::Error::Precondition(reason)) => {
                    eprintln!("{kind:<20} x^{layer}: omitted ({reason})");
                    omitted.push(OmittedProbe { kind, layer, reason });
                    continue;
                }
                Err(e) => return Err(e).with_context(|| format!("{kind} probe at x^{layer}")),
            };
            eprintln!("{kind:<20} x^{layer}: F1 {:.4} (permuted {:.4})", report.f1, report.baseline_f1);
            if let Some(w) = &report.warning {
                eprintln!("warning: {w}");
            }
            reports.push(report);
        }
    }
    export_results(&mut rec, "probes", &ProbeTable { probes: reports, omitted })?;
    rec.finish()?;
    Ok(())
}

options! {
    PatchArgs => Patch {
        runs: usize = "10" => "Independent runs per depth",
        samples: usize = "1000" => "Tree pairs per run",
        seed: u64 = "0" => "Seed for tree sampling",
        register_layer: usize = "0" => "Block whose attention selects registers",
        threshold: f64 = "0.3" => "Register attention threshold",
        out: PathBuf = "runs/patch" => "Output directory",
        @optional {
            checkpoint: PathBuf => "Model checkpoint (required)",
            stream: usize => "Residual stream patched at the registers [default: min(4, L)]",
            depths: List<usize> => "Goal depths to evaluate [default: 1..n_nodes]",
        }
    }
}

pub fn patch_curve(r: &RegisterPatchReport) -> Payload {
    Payload::DepthCurve {
        title: format!("Register patching at x^{}", r.stream),
        x_label: "goal depth".into(),
        y_label: "logit difference effect".into(),
        series: vec![Series {
            name: "mean effect".into(),
            points: r
                .depths
                .iter()
                .map(|d| CurvePoint { x: d.depth as f64, y: d.ci.mean, band: Some((d.ci.lo, d.ci.hi)) })
                .collect(),
        }],
    }
}

pub fn patch(o: Patch, ctx: &Ctx) -> Result<()> {
    let ckpt = required(o.checkpoint.clone(), "checkpoint")?;
    let mut rec = RunRecorder::new(&o.out, "patch", &o, ctx.threads)?;
    rec.seed("patch", o.seed);
    let params = load_checkpoint(&ckpt, &mut rec)?;
    let mut cfg = RegisterPatchConfig::for_model(&params)?;
    cfg.runs = o.runs;
    cfg.samples = o.samples;
    cfg.seed = o.seed;
    cfg.registers = RegisterConfig { threshold: o.threshold, layer: o.register_layer };
    if let Some(s) = o.stream {
        cfg.stream = s;
    }
    if let Some(d) = &o.depths {
        cfg.depths = d.0.clone();
    }
    if cfg.stream == params.config.n_layers {
        eprintln!("warning: x^{} is the final residual; patching it cannot reach the root prediction", cfg.stream);
    }
    let report = register_patch_experiment(&params, &cfg)?;
    for (d, why) in &report.omitted {
        eprintln!("depth {d} omitted: {why}");
    }
    export_results(&mut rec, "patch", &report)?;
    if !report.depths.is_empty() {
        write_svg(&mut rec, "patch.svg", &patch_curve(&report))?;
    }
    rec.finish()?;
    Ok(())
}

options! {
    ScrubArgs => Scrub {
        hypothesis: String = "backward-chaining" => "Hypothesis to test (backward-chaining)",
        lookahead_constraints: bool = "false" => "Keep clean edge-target and register contributions in the last two blocks",
        donors: String = "resample" => "resample (matching trees) or self (sanity check, recovers exactly 1)",
        max_attempts: usize = "10000" => "Donor rejection-sampling budget",
        count: usize = "1000" => "Generated instances when --data is absent",
        seed: u64 = "0" => "Seed for instances and donors",
        register_layer: usize = "0" => "Block whose attention selects registers",
        threshold: f64 = "0.3" => "Register attention threshold",
        out: PathBuf = "runs/scrub" => "Output directory",
        @optional {
            checkpoint: PathBuf => "Model checkpoint (required)",
            data: PathBuf => "JSONL instances",
            layers: List<usize> => "Blocks to scrub [default: all]",
        }
    }
}

pub fn scrub_curve(r: &ScrubReport) -> Payload {
    Payload::DepthCurve {
        title: if r.lookahead_constraints { "Causal scrubbing (lookahead constrained)" } else { "Causal scrubbing" }.into(),
        x_label: "path length".into(),
        y_label: "loss recovered (L_CS)".into(),
        series: vec![Series {
            name: "L_CS".into(),
            points: r.rows.iter().map(|x| CurvePoint { x: x.path_len as f64, y: x.l_cs, band: None }).collect(),
        }],
    }
}

pub fn scrub(o: Scrub, ctx: &Ctx) -> Result<()> {
    if o.hypothesis != "backward-chaining" {
        return Err(UsageError(format!("unknown hypothesis {:?} (expected backward-chaining)", o.hypothesis)).into());
    }
    let donors = match o.donors.as_str() {
        "resample" => DonorScheme::Resample { max_attempts: o.max_attempts },
        "self" => DonorScheme::SelfDonor,
        other => return Err(UsageError(format!("unknown donor scheme {other:?}")).into()),
    };
    let ckpt = required(o.checkpoint.clone(), "checkpoint")?;
    let mut rec = RunRecorder::new(&o.out, "scrub", &o, ctx.threads)?;
    rec.seed("donors", o.seed);
    let params = load_checkpoint(&ckpt, &mut rec)?;
    let insts = instances(o.data.as_deref(), o.count, o.seed, n_nodes_of(&params)?, &mut rec)?;
    let hyp = ScrubHypothesis {
        layers: o.layers.as_ref().map(|l| l.0.clone()),
        lookahead_constraints: o.lookahead_constraints,
        donors,
        registers: RegisterConfig { threshold: o.threshold, layer: o.register_layer },
        seed: o.seed,
    };
    let report = causal_scrub(&params, &insts, &hyp)?;
    for r in &report.rows {
        eprintln!("path length {:>2}: n {:>4}  L_CS {:.4}", r.path_len, r.n, r.l_cs);
    }
    export_results(&mut rec, "scrub", &report)?;
    if !report.rows.is_empty() {
        write_svg(&mut rec, "scrub.svg", &scrub_curve(&report))?;
    }
    rec.finish()?;
    Ok(())
}

options! {
    KnockoutArgs => Knockout {
        count: usize = "1000" => "Generated instances when --data is absent",
        seed: u64 = "0" => "Seed for instances",
        register_layer: usize = "0" => "Block whose attention selects registers",
        threshold: f64 = "0.3" => "Register attention threshold",
        out: PathBuf = "runs/knockout" => "Output directory",
        @optional {
            checkpoint: PathBuf => "Model checkpoint (required)",
            data: PathBuf => "JSONL instances",
        }
    }
}

pub fn knockout(o: Knockout, ctx: &Ctx) -> Result<()> {
    let ckpt = required(o.checkpoint.clone(), "checkpoint")?;
    let mut rec = RunRecorder::new(&o.out, "knockout", &o, ctx.threads)?;
    let params = load_checkpoint(&ckpt, &mut rec)?;
    let insts = instances(o.data.as_deref(), o.count, o.seed, n_nodes_of(&params)?, &mut rec)?;
    let summary = knockout_experiment(&params, &insts, &RegisterConfig { threshold: o.threshold, layer: o.register_layer })?;
    eprintln!(
        "knockout lowered the correct logit in {}/{} instances (mean change {:.4})",
        summary.lowered, summary.n, summary.mean_delta
    );
    export_results(&mut rec, "knockout", &summary)?;
    rec.finish()?;
    Ok(())
}

options! {
    CircuitsArgs => Circuits {
        rp_layer: usize = "0" => "Block whose QK circuit defines R_P",
        approximate: bool = "false" => "Allow LayerNorm models by ignoring the norms",
        out: PathBuf = "runs/circuits" => "Output directory",
        @optional {
            checkpoint: PathBuf => "Model checkpoint (required)",
        }
    }
}

#[derive(serde::Serialize)]
struct RpRow {
    position: usize,
    preferred_node: usize,
}

pub fn circuits(o: Circuits, ctx: &Ctx) -> Result<()> {
    let ckpt = required(o.checkpoint.clone(), "checkpoint")?;
    let mut rec = RunRecorder::new(&o.out, "circuits", &o, ctx.threads)?;
    let params = load_checkpoint(&ckpt, &mut rec)?;
    let m = circuit_matrices(&params, o.rp_layer, o.approximate)?;
    rec.write_bytes("m0.csv", &crate::export::matrix_csv(&m.m0)?)?;
    rec.write_bytes("m1.csv", &crate::export::matrix_csv(&m.m1)?)?;
    rec.write_bytes("rp.csv", &crate::export::matrix_csv(&m.rp)?)?;
    let prefs: Vec<RpRow> =
        (0..m.rp.nrows()).map(|p| RpRow { position: p, preferred_node: preferred_subgoal(&m.rp, p) }).collect();
    rec.write_bytes("rp_preferred.csv", &to_csv(&prefs)?)?;
    rec.write_json("circuits.json", &m)?;
    rec.finish()?;
    Ok(())
}

options! {
    LensArgs => Lens {
        count: usize = "1000" => "Training instances for the lenses",
        test_count: usize = "500" => "Held-out instances for lens loss",
        seed: u64 = "0" => "Seed for instances",
        instance: usize = "0" => "Held-out instance drawn in the tree projection",
        max_iter: usize = "500" => "Lens optimizer iteration cap",
        out: PathBuf = "runs/lens" => "Output directory",
        @optional {
            checkpoint: PathBuf => "Model checkpoint (required)",
            skips: List<usize> => "Numbers of skipped blocks [default: 0..L-1]",
        }
    }
}

pub fn lens(o: Lens, ctx: &Ctx) -> Result<()> {
    let ckpt = required(o.checkpoint.clone(), "checkpoint")?;
    let mut rec = RunRecorder::new(&o.out, "lens", &o, ctx.threads)?;
    rec.seed("data", o.seed);
    let params = load_checkpoint(&ckpt, &mut rec)?;
    let n_nodes = n_nodes_of(&params)?;
    let train_set = build_dataset(&DatasetConfig { seed: o.seed, count: o.count, n_nodes, order: EdgeOrder::Shuffled }, None)?;
    let seen: HashSet<TreeKey> = train_set.iter().map(|i| TreeKey::of(&i.tree)).collect();
    let test_set = build_dataset(
        &DatasetConfig { seed: o.seed.wrapping_add(1), count: o.test_count, n_nodes, order: EdgeOrder::Shuffled },
        Some(&seen),
    )?;
    let inst = test_set
        .get(o.instance)
        .ok_or_else(|| UsageError(format!("--instance {} out of range (test set has {})", o.instance, test_set.len())))?;
    let skips = o.skips.clone().map_or_else(|| (0..params.config.n_layers).collect(), |s| s.0);
    let fit = FitOptions { max_iter: o.max_iter, ..Default::default() };
    let mut lenses = Vec::new();
    let mut rows = Vec::new();
    for &n in &skips {
        let lens = train_skip_lens(&params, &train_set, n, &fit)?;
        if let Some(w) = &lens.warning {
            eprintln!("warning: {w}");
        }
        let loss = lens_loss(&lens, &params, &test_set)?;
        eprintln!("skip {n} (x^{}): loss {loss:.4}", lens.stream);
        rows.push(LensRow { skipped: n, stream: lens.stream, loss, converged: lens.converged });
        lenses.push(lens);
    }
    lenses.sort_by_key(|l| l.stream);
    let seq = encode_instance(inst)?;
    let cache = forward(&params, seq.prompt(), None)?;
    let readout = apply_skip_lens(&lenses, &params, &cache, 0, seq.path_start)?;
    let payload = Payload::TreeLensProjection {
        edges: inst.tree.edges(),
        goal: inst.goal,
        path: inst.path.clone(),
        layers: readout
            .streams
            .iter()
            .zip(&readout.argmax)
            .zip(&readout.node_probs)
            .map(|((&stream, &argmax), probs)| LensLayer { stream, argmax, probs: probs.clone() })
            .collect(),
    };
    let table = LensTable(rows);
    export_results(&mut rec, "lens", &table)?;
    rec.write_json("lens_readout.json", &payload)?;
    write_svg(&mut rec, "lens.svg", &payload)?;
    rec.finish()?;
    Ok(())
}

options! {
    StatsArgs => Stats {
        count: usize = "1000" => "Trees to aggregate over",
        seed: u64 = "0" => "Seed for instances",
        register_layer: usize = "0" => "Block whose attention selects registers",
        threshold: f64 = "0.3" => "Register attention threshold",
        out: PathBuf = "runs/stats" => "Output directory",
        @optional {
            checkpoint: PathBuf => "Model checkpoint (required)",
            data: PathBuf => "JSONL instances",
        }
    }
}

pub fn stats(o: Stats, ctx: &Ctx) -> Result<()> {
    let ckpt = required(o.checkpoint.clone(), "checkpoint")?;
    let mut rec = RunRecorder::new(&o.out, "stats", &o, ctx.threads)?;
    let params = load_checkpoint(&ckpt, &mut rec)?;
    let insts = instances(o.data.as_deref(), o.count, o.seed, n_nodes_of(&params)?, &mut rec)?;
    let s = subgoal_statistics(&params, &insts, &RegisterConfig { threshold: o.threshold, layer: o.register_layer })?;
    export_results(&mut rec, "subgoals", &s)?;
    rec.finish()?;
    Ok(())
}

options! {
    VizArgs => Viz {
        instance: usize = "0" => "Instance index for attention overlays",
        layer: usize = "0" => "Block whose attention pattern is drawn",
        seed: u64 = "0" => "Seed for the generated instance when --data is absent",
        out: PathBuf = "runs/viz" => "Output directory",
        @optional {
            kind: SvgKind => "attention-overlay, tree-lens-projection or depth-curve (required)",
            payload: PathBuf => "Payload JSON, or a patch/scrub/lens report for depth curves",
            checkpoint: PathBuf => "Checkpoint for attention overlays built from the model",
            data: PathBuf => "JSONL instances for attention overlays",
        }
    }
}

impl std::str::FromStr for SvgKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [SvgKind::AttentionOverlay, SvgKind::TreeLensProjection, SvgKind::DepthCurve]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown figure kind {s:?}"))
    }
}

impl std::fmt::Display for SvgKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Reads a payload file: a tagged payload, or one of the reports that has a
/// natural depth curve.
pub fn read_payload(path: &Path) -> Result<Payload> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(p) = serde_json::from_slice::<Payload>(&bytes) {
        return Ok(p);
    }
    if let Ok(r) = serde_json::from_slice::<RegisterPatchReport>(&bytes) {
        return Ok(patch_curve(&r));
    }
    if let Ok(r) = serde_json::from_slice::<ScrubReport>(&bytes) {
        return Ok(scrub_curve(&r));
    }
    if let Ok(t) = serde_json::from_slice::<LensTable>(&bytes) {
        return Ok(Payload::DepthCurve {
            title: "Skip-lens loss".into(),
            x_label: "stream".into(),
            y_label: "next-token loss".into(),
            series: vec![Series {
                name: "lens".into(),
                points: t.rows().iter().map(|r| CurvePoint { x: r.stream as f64, y: r.loss, band: None }).collect(),
            }],
        });
    }
    bail!("{} is neither a figure payload nor a patch, scrub or lens report", path.display())
}

pub fn viz(o: Viz, ctx: &Ctx) -> Result<()> {
    let kind = required(o.kind, "kind")?;
    let mut rec = RunRecorder::new(&o.out, "viz", &o, ctx.threads)?;
    let payload = match (&o.payload, &o.checkpoint) {
        (Some(p), _) => read_payload(p)?,
        (None, Some(ckpt)) if kind == SvgKind::AttentionOverlay => {
            let params = load_checkpoint(ckpt, &mut rec)?;
            if o.layer >= params.config.n_layers {
                return Err(UsageError(format!("--layer {} out of range", o.layer)).into());
            }
            let insts = instances(o.data.as_deref(), o.instance + 1, o.seed, n_nodes_of(&params)?, &mut rec)?;
            let inst = insts.get(o.instance).ok_or_else(|| UsageError("--instance out of range".into()))?;
            let seq = encode_instance(inst)?;
            let toks = &seq.tokens[..seq.unpadded_len()];
            let cache = forward(&params, toks, None)?;
            let pat = cache.pattern(o.layer, 0);
            Payload::AttentionOverlay {
                tokens: toks.iter().map(|&t| Vocabulary::symbol(t)).collect(),
                weights: pat.outer_iter().map(|r| r.iter().map(|&w| w as f64).collect()).collect(),
            }
        }
        _ => {
            return Err(UsageError("--payload is required (or --checkpoint for attention overlays)".into()).into())
        }
    };
    let svg = render_svg(kind, &payload)?;
    rec.write_bytes(&format!("{}.svg", kind.name()), svg.as_bytes())?;
    rec.finish()?;
    Ok(())
}
