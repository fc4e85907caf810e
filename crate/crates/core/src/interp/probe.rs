use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{build_probe_labels, Label, LabelKind};
use super::registers::{detect_register_positions, RegisterConfig};
use super::{for_each_cached, layout_for};
use crate::model::Parameters;
use crate::task::{build_dataset, encode_instance, DatasetConfig, EdgeOrder, MAX_NODES};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// L2 strength on the (standardized) weights; biases are not penalized.
    pub l2: f64,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { l2: 1e-4, tol: 1e-6, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// One multinomial classifier.
    Softmax,
    /// Independent binary classifiers, one per column.
    Sigmoid,
}

/// A fitted linear map on raw (unstandardized) features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub objective: Objective,
    /// features × outputs
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub train_loss: f64,
}

impl LinearModel {
    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn predict_classes(&self, x: &Array2<f64>) -> Vec<usize> {
        self.scores(x)
            .outer_iter()
            .map(|r| crate::model::argmax(r))
            .collect()
    }

    pub fn predict_bits(&self, x: &Array2<f64>) -> Array2<bool> {
        self.scores(x).mapv(|s| s > 0.0)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

type Gradient = (Array2<f64>, Array1<f64>);

/// Mean data loss plus L2 term, and the gradient w.r.t. (W, b).
fn loss_grad(
    z: &Array2<f64>,
    y: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    l2: f64,
    obj: Objective,
    with_grad: bool,
) -> (f64, Option<Gradient>) {
    let n = z.nrows() as f64;
    let s = z.dot(w) + b;
    let mut loss = 0.0;
    let mut ds = Array2::<f64>::zeros(s.raw_dim());
    for ((srow, yrow), mut drow) in s.outer_iter().zip(y.outer_iter()).zip(ds.outer_iter_mut()) {
        match obj {
            Objective::Softmax => {
                let m = srow.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let lse = m + srow.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                for ((d, &sv), &yv) in drow.iter_mut().zip(srow).zip(yrow) {
                    let p = (sv - lse).exp();
                    loss -= yv * (sv - lse);
                    *d = (p - yv) / n;
                }
            }
            Objective::Sigmoid => {
                for ((d, &sv), &yv) in drow.iter_mut().zip(srow).zip(yrow) {
                    // log(1 + e^s) − y s, computed stably
                    loss += sv.max(0.0) + (-sv.abs()).exp().ln_1p() - yv * sv;
                    *d = (sigmoid(sv) - yv) / n;
                }
            }
        }
    }
    loss = loss / n + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    if !with_grad {
        return (loss, None);
    }
    let gw = z.t().dot(&ds) + &(w * l2);
    let gb = ds.sum_axis(Axis(0));
    (loss, Some((gw, gb)))
}

/// Full-batch gradient descent with a backtracking (Armijo) step size on
/// standardized features; the standardization is folded back into the
/// returned weights. `y` is one-hot for softmax and 0/1 for sigmoid.
pub fn fit_linear(x: &Array2<f64>, y: &Array2<f64>, obj: Objective, opts: &FitOptions) -> Result<LinearModel> {
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(Error::invalid("feature and label rows must match and be non-empty"));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let sd = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = (x - &mean) / &sd;
    let (d, k) = (x.ncols(), y.ncols());
    let mut w = Array2::<f64>::zeros((d, k));
    let mut b = Array1::<f64>::zeros(k);
    let mut step: f64 = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut gnorm = f64::INFINITY;
    let (mut loss, _) = loss_grad(&z, y, &w, &b, opts.l2, obj, false);
    while iterations < opts.max_iter {
        let (f, g) = loss_grad(&z, y, &w, &b, opts.l2, obj, true);
        let (gw, gb) = g.expect("gradient requested");
        let g2 = gw.iter().chain(gb.iter()).map(|v| v * v).sum::<f64>();
        gnorm = g2.sqrt();
        loss = f;
        if gnorm <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        step = (step * 2.0).min(1e6);
        loop {
            let w2 = &w - &(&gw * step);
            let b2 = &b - &(&gb * step);
            let (f2, _) = loss_grad(&z, y, &w2, &b2, opts.l2, obj, false);
            if f2 <= f - 0.5 * step * g2 || step < 1e-12 {
                w = w2;
                b = b2;
                loss = f2;
                break;
            }
            step *= 0.5;
        }
    }
    let weight = &w / &sd.clone().insert_axis(Axis(1));
    let bias = &b - &mean.dot(&weight);
    Ok(LinearModel { objective: obj, weight, bias, converged, iterations, grad_norm: gnorm, train_loss: loss })
}

/// Macro F1 over every class that appears in the truth or the predictions.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let classes: std::collections::BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (&t, &p) in truth.iter().zip(pred) {
                match (t == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            f1(tp, fp, fn_)
        })
        .sum();
    total / classes.len() as f64
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Micro F1 over all bits.
pub fn micro_f1(truth: &Array2<bool>, pred: &Array2<bool>) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&t, &p) in truth.iter().zip(pred) {
        match (t, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    f1(tp, fp, fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamConvention {
    /// `x^ℓ` is the residual after block ℓ (1-based), i.e. after ℓ blocks.
    #[default]
    PostBlock,
    /// `x^ℓ` is the residual entering block ℓ (1-based): one block earlier.
    PreBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: LabelKind,
    /// Stream index `ℓ` of `x^ℓ`, in `0..=L`.
    pub layer: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub fit: FitOptions,
    pub seed: u64,
    /// Edge kinds: one 256-way head instead of two 16-way heads.
    pub joint_edge: bool,
    pub convention: StreamConvention,
    pub registers: RegisterConfig,
    /// Subpath depth override; defaults to the number of deduction blocks
    /// between subgoal selection and the probed stream.
    pub subpath_depth: Option<usize>,
}

impl ProbeSpec {
    pub fn new(kind: LabelKind, layer: usize) -> Self {
        ProbeSpec {
            kind,
            layer,
            n_train: 8000,
            n_test: 8000,
            fit: FitOptions::default(),
            seed: 0,
            joint_edge: false,
            convention: StreamConvention::PostBlock,
            registers: RegisterConfig::default(),
            subpath_depth: None,
        }
    }

    pub fn stream(&self) -> usize {
        match self.convention {
            StreamConvention::PostBlock => self.layer,
            StreamConvention::PreBlock => self.layer.saturating_sub(1),
        }
    }

    pub fn effective_subpath_depth(&self) -> usize {
        self.subpath_depth
            .unwrap_or_else(|| self.stream().saturating_sub(1 + self.registers.layer))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: LabelKind,
    pub layer: usize,
    /// Macro F1 for single-label kinds, micro F1 for multilabel kinds.
    pub f1: f64,
    pub per_label: Vec<LabelScore>,
    /// The same probe fitted on permuted training labels.
    pub baseline_f1: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub converged: bool,
    pub warning: Option<String>,
}

/// Fitted heads: two for split edge probes, one otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeWeights {
    pub heads: Vec<LinearModel>,
}

fn one_hot(classes: &[usize], k: usize) -> Array2<f64> {
    let mut y = Array2::zeros((classes.len(), k));
    for (i, &c) in classes.iter().enumerate() {
        y[[i, c]] = 1.0;
    }
    y
}

fn bits_matrix(labels: &[&Vec<bool>]) -> Array2<bool> {
    let k = labels.first().map_or(0, |b| b.len());
    Array2::from_shape_fn((labels.len(), k), |(i, j)| labels[i][j])
}

struct Fitted {
    weights: ProbeWeights,
    f1: f64,
    per_label: Vec<LabelScore>,
}

fn fit_and_score(
    kind: LabelKind,
    joint_edge: bool,
    x_train: &Array2<f64>,
    y_train: &[Label],
    x_test: &Array2<f64>,
    y_test: &[Label],
    opts: &FitOptions,
) -> Result<Fitted> {
    let classes_of = |ls: &[Label], f: &dyn Fn(&Label) -> usize| ls.iter().map(f).collect::<Vec<_>>();
    match y_train.first() {
        Some(Label::Edge { .. }) => {
            let src = |l: &Label| match l {
                Label::Edge { source, .. } => *source,
                _ => unreachable!(),
            };
            let tgt = |l: &Label| match l {
                Label::Edge { target, .. } => *target,
                _ => unreachable!(),
            };
            let joint = |l: &Label| src(l) * MAX_NODES + tgt(l);
            let truth = classes_of(y_test, &joint);
            if joint_edge {
                let k = MAX_NODES * MAX_NODES;
                let head = fit_linear(x_train, &one_hot(&classes_of(y_train, &joint), k), Objective::Softmax, opts)?;
                let pred = head.predict_classes(x_test);
                let f1 = macro_f1(&truth, &pred);
                return Ok(Fitted { weights: ProbeWeights { heads: vec![head] }, f1, per_label: vec![] });
            }
            let hs = fit_linear(x_train, &one_hot(&classes_of(y_train, &src), MAX_NODES), Objective::Softmax, opts)?;
            let ht = fit_linear(x_train, &one_hot(&classes_of(y_train, &tgt), MAX_NODES), Objective::Softmax, opts)?;
            let ps = hs.predict_classes(x_test);
            let pt = ht.predict_classes(x_test);
            let pred: Vec<usize> = ps.iter().zip(&pt).map(|(s, t)| s * MAX_NODES + t).collect();
            let per_label = vec![
                LabelScore { label: "source".into(), f1: macro_f1(&classes_of(y_test, &src), &ps), support: y_test.len() },
                LabelScore { label: "target".into(), f1: macro_f1(&classes_of(y_test, &tgt), &pt), support: y_test.len() },
            ];
            Ok(Fitted { weights: ProbeWeights { heads: vec![hs, ht] }, f1: macro_f1(&truth, &pred), per_label })
        }
        Some(Label::Class(_)) => {
            let cls = |l: &Label| match l {
                Label::Class(c) => *c,
                _ => unreachable!(),
            };
            let k = y_train.iter().chain(y_test).map(cls).max().unwrap_or(0) + 1;
            let head = fit_linear(x_train, &one_hot(&classes_of(y_train, &cls), k), Objective::Softmax, opts)?;
            let pred = head.predict_classes(x_test);
            let truth = classes_of(y_test, &cls);
            let per_label = (0..k)
                .filter_map(|c| {
                    let support = truth.iter().filter(|&&t| t == c).count();
                    (support > 0).then(|| {
                        let t: Vec<usize> = truth.iter().map(|&t| (t == c) as usize).collect();
                        let p: Vec<usize> = pred.iter().map(|&p| (p == c) as usize).collect();
                        let (tp, fp, fn_) = count(&t, &p);
                        LabelScore { label: c.to_string(), f1: f1(tp, fp, fn_), support }
                    })
                })
                .collect();
            Ok(Fitted { weights: ProbeWeights { heads: vec![head] }, f1: macro_f1(&truth, &pred), per_label })
        }
        Some(Label::Bits(_)) => {
            let bits = |ls: &[Label]| {
                let refs: Vec<&Vec<bool>> = ls
                    .iter()
                    .map(|l| match l {
                        Label::Bits(b) => b,
                        _ => unreachable!(),
                    })
                    .collect();
                bits_matrix(&refs)
            };
            let ytr = bits(y_train).mapv(|b| b as u8 as f64);
            let truth = bits(y_test);
            let head = fit_linear(x_train, &ytr, Objective::Sigmoid, opts)?;
            let pred = head.predict_bits(x_test);
            let per_label = (0..truth.ncols())
                .filter_map(|j| {
                    let support = truth.column(j).iter().filter(|&&b| b).count();
                    (support > 0).then(|| {
                        let t = truth.column(j).to_owned().insert_axis(Axis(1));
                        let p = pred.column(j).to_owned().insert_axis(Axis(1));
                        let label = if kind == LabelKind::SubpathAtRegister {
                            format!("{}->{}", j / MAX_NODES, j % MAX_NODES)
                        } else {
                            j.to_string()
                        };
                        LabelScore { label, f1: micro_f1(&t, &p), support }
                    })
                })
                .collect();
            Ok(Fitted { weights: ProbeWeights { heads: vec![head] }, f1: micro_f1(&truth, &pred), per_label })
        }
        None => Err(Error::precondition("no training examples")),
    }
}

fn count(t: &[usize], p: &[usize]) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (&a, &b) in t.iter().zip(p) {
        match (a, b) {
            (1, 1) => c.0 += 1,
            (0, 1) => c.1 += 1,
            (1, 0) => c.2 += 1,
            _ => {}
        }
    }
    c
}

/// Fits a probe on `(x_train, y_train)`, scores it on the test split, and
/// repeats the fit on permuted training labels for a chance baseline.
#[allow(clippy::too_many_arguments)]
pub fn train_linear_probe(
    kind: LabelKind,
    layer: usize,
    x_train: &Array2<f64>,
    y_train: &[Label],
    x_test: &Array2<f64>,
    y_test: &[Label],
    opts: &FitOptions,
    joint_edge: bool,
    seed: u64,
) -> Result<(ProbeWeights, ProbeReport)> {
    let distinct: std::collections::HashSet<&Label> = y_train.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::precondition("probe needs at least two distinct labels"));
    }
    if x_train.nrows() != y_train.len() || x_test.nrows() != y_test.len() {
        return Err(Error::invalid("feature rows and labels differ in count"));
    }
    let fitted = fit_and_score(kind, joint_edge, x_train, y_train, x_test, y_test, opts)?;
    let mut permuted = y_train.to_vec();
    permuted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xba5e));
    let baseline = fit_and_score(kind, joint_edge, x_train, &permuted, x_test, y_test, opts)?;
    let converged = fitted.weights.heads.iter().all(|h| h.converged);
    let warning = (!converged).then(|| {
        let g = fitted.weights.heads.iter().map(|h| h.grad_norm).fold(0.0, f64::max);
        format!("probe did not reach tolerance {} in {} iterations (gradient norm {g:.3e})", opts.tol, opts.max_iter)
    });
    let report = ProbeReport {
        kind,
        layer,
        f1: fitted.f1,
        per_label: fitted.per_label,
        baseline_f1: baseline.f1,
        n_train: y_train.len(),
        n_test: y_test.len(),
        converged,
        warning,
    };
    Ok((fitted.weights, report))
}

/// End to end: draws `n_train + n_test` fresh instances, runs the model,
/// takes one random labeled position per instance, and fits the probe.
pub fn run_probe(params: &Parameters<f32>, spec: &ProbeSpec) -> Result<(ProbeWeights, ProbeReport)> {
    let n_layers = params.config.n_layers;
    if spec.layer > n_layers {
        return Err(Error::invalid(format!("layer {} out of range 0..={n_layers}", spec.layer)));
    }
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::invalid("probe split sizes must be at least 1"));
    }
    let layout = layout_for(params)?;
    let instances = build_dataset(
        &DatasetConfig {
            seed: spec.seed,
            count: spec.n_train + spec.n_test,
            n_nodes: layout.n_nodes,
            order: EdgeOrder::Shuffled,
        },
        None,
    )?;
    let seqs: Vec<Vec<u32>> = instances
        .iter()
        .map(|i| encode_instance(i).map(|s| s.tokens))
        .collect::<Result<_>>()?;
    let stream = spec.stream();
    let depth = spec.effective_subpath_depth();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut feats: Vec<(usize, Vec<f64>, Label)> = Vec::new();
    for_each_cached(params, &seqs, |off, cache| {
        for b in 0..cache.batch {
            let i = off + b;
            let inst = std::slice::from_ref(&instances[i]);
            let regs = (spec.kind == LabelKind::SubpathAtRegister)
                .then(|| vec![detect_register_positions(cache, b, &layout, &spec.registers)]);
            let examples = build_probe_labels(spec.kind, inst, regs.as_deref(), depth)?;
            if examples.is_empty() {
                continue;
            }
            let ex = &examples[rng.random_range(0..examples.len())];
            let x = cache.resid_at(stream, b, ex.position).iter().map(|&v| v as f64).collect();
            feats.push((i, x, ex.label.clone()));
        }
        Ok(())
    })?;
    let (train, test): (Vec<_>, Vec<_>) = feats.into_iter().partition(|f| f.0 < spec.n_train);
    if test.is_empty() {
        return Err(Error::precondition("no labeled positions in the test split"));
    }
    let to_matrix = |rows: &[(usize, Vec<f64>, Label)]| {
        let d = params.config.d_model;
        Array2::from_shape_fn((rows.len(), d), |(r, c)| rows[r].1[c])
    };
    let labels = |rows: &[(usize, Vec<f64>, Label)]| rows.iter().map(|r| r.2.clone()).collect::<Vec<_>>();
    train_linear_probe(
        spec.kind,
        spec.layer,
        &to_matrix(&train),
        &labels(&train),
        &to_matrix(&test),
        &labels(&test),
        &spec.fit,
        spec.joint_edge,
        spec.seed,
    )
}
