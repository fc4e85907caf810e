use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};

use super::intervene::{ActionKind, InterventionSpec, Site};
use super::params::NormParams;
use super::{Float, Parameters};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// LayerNorm output plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    /// Normalized input before gain/bias.
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
    pub out: Array2<T>,
}

/// Everything computed inside one block. Rows are `batch * seq_len`,
/// sequence-major: row `b * seq_len + i` is position `i` of sequence `b`.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub resid_pre: Array2<T>,
    pub ln1: Option<NormCache<T>>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// batch × query × key, scaled, −∞ above the diagonal and where blocked.
    pub scores: Array3<T>,
    /// Post-softmax attention, same shape as `scores`.
    pub pattern: Array3<T>,
    /// Attention-weighted values before `W_O`.
    pub z: Array2<T>,
    pub attn_out: Array2<T>,
    pub resid_mid: Array2<T>,
    pub ln2: Option<NormCache<T>>,
    pub mlp_pre: Array2<T>,
    pub mlp_act: Array2<T>,
    pub mlp_out: Array2<T>,
    pub resid_post: Array2<T>,
}

/// Activations of a (batched) forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache<T> {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<Vec<u32>>,
    pub layers: Vec<LayerCache<T>>,
    pub final_norm: Option<NormCache<T>>,
    /// rows × vocab
    pub logits: Array2<T>,
}

impl<T: Float> ActivationCache<T> {
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq_len + pos
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Residual stream `x^ℓ`: `ℓ = 0` is the embedding, `ℓ = k` the output
    /// of block `k - 1`.
    pub fn resid(&self, stream: usize) -> &Array2<T> {
        if stream == 0 {
            &self.layers[0].resid_pre
        } else {
            &self.layers[stream - 1].resid_post
        }
    }

    pub fn resid_at(&self, stream: usize, b: usize, pos: usize) -> ArrayView1<'_, T> {
        self.resid(stream).row(self.row(b, pos))
    }

    pub fn pattern(&self, layer: usize, b: usize) -> ArrayView2<'_, T> {
        self.layers[layer].pattern.index_axis(Axis(0), b)
    }

    pub fn logits_at(&self, b: usize, pos: usize) -> ArrayView1<'_, T> {
        self.logits.row(self.row(b, pos))
    }

    /// Logits of sequence `b`, seq_len × vocab.
    pub fn logits_of(&self, b: usize) -> ArrayView2<'_, T> {
        let s = self.seq_len;
        self.logits.slice(s![b * s..(b + 1) * s, ..])
    }

    pub fn site(&self, layer: usize, site: Site) -> Option<&Array2<T>> {
        let l = &self.layers[layer];
        match site {
            Site::ResidPre => Some(&l.resid_pre),
            Site::ResidPost => Some(&l.resid_post),
            Site::AttnOut => Some(&l.attn_out),
            Site::MlpOut => Some(&l.mlp_out),
            Site::AttnScores => None,
        }
    }

    /// Rows of a site for one sequence at the given positions, ready to be
    /// fed back as `Replace` values.
    pub fn gather(&self, layer: usize, site: Site, b: usize, positions: &[usize]) -> Result<Array2<T>> {
        let src = self
            .site(layer, site)
            .ok_or_else(|| Error::invalid("attn-scores cannot be gathered as residual rows"))?;
        let rows: Vec<usize> = positions.iter().map(|&p| self.row(b, p)).collect();
        Ok(src.select(Axis(0), &rows))
    }
}

pub fn gelu<T: Float>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0 * 0.044715) * x * x)
}

pub fn layer_norm<T: Float>(x: &Array2<T>, p: &NormParams<T>) -> NormCache<T> {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.outer_iter_mut().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let out = &xhat * &p.gain + &p.bias;
    NormCache { xhat, rstd, out }
}

fn add_bias<T: Float>(m: &mut Array2<T>, b: &Array1<T>) {
    *m += b;
}

fn apply_row_edits<T: Float>(
    x: &mut Array2<T>,
    spec: Option<&InterventionSpec<T>>,
    layer: usize,
    site: Site,
    batch: usize,
    seq_len: usize,
) {
    let Some(spec) = spec else { return };
    for a in spec.at(layer, site) {
        let seqs: Vec<usize> = match a.batch_index {
            Some(b) => vec![b],
            None => (0..batch).collect(),
        };
        for b in seqs {
            for (i, &p) in a.positions.iter().enumerate() {
                let mut row = x.row_mut(b * seq_len + p);
                match &a.kind {
                    ActionKind::Replace(v) => row.assign(&v.row(i)),
                    ActionKind::Add(v) => row += &v.row(i),
                    ActionKind::BlockScores { .. } => {}
                }
            }
        }
    }
}

/// Runs the model on a batch of equal-length token sequences, recording
/// every intermediate activation and applying `spec` at its declared sites.
pub fn forward_batch<T: Float>(
    params: &Parameters<T>,
    tokens: &[&[u32]],
    spec: Option<&InterventionSpec<T>>,
) -> Result<ActivationCache<T>> {
    let cfg = &params.config;
    let batch = tokens.len();
    if batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let seq_len = tokens[0].len();
    if seq_len == 0 || seq_len > cfg.context_len {
        return Err(Error::invalid(format!(
            "sequence length {seq_len} outside 1..={}",
            cfg.context_len
        )));
    }
    if tokens.iter().any(|t| t.len() != seq_len) {
        return Err(Error::invalid("batched sequences must share one length"));
    }
    for (b, seq) in tokens.iter().enumerate() {
        if let Some((i, &t)) = seq.iter().enumerate().find(|(_, &t)| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token {t} at sequence {b} position {i} exceeds vocab")));
        }
    }
    if let Some(spec) = spec {
        spec.validate(cfg.n_layers, seq_len, batch, cfg.d_model)?;
    }

    let d = cfg.d_model;
    let rows = batch * seq_len;
    let mut x = Array2::<T>::zeros((rows, d));
    for (b, seq) in tokens.iter().enumerate() {
        for (i, &t) in seq.iter().enumerate() {
            let mut r = x.row_mut(b * seq_len + i);
            r.assign(&params.embed.row(t as usize));
            r += &params.pos_embed.row(i);
        }
    }

    let scale = T::one() / T::of((cfg.d_head as f64).sqrt());
    let neg_inf = T::neg_infinity();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, blk) in params.blocks.iter().enumerate() {
        apply_row_edits(&mut x, spec, l, Site::ResidPre, batch, seq_len);
        let resid_pre = x;
        let ln1 = blk.ln1.as_ref().map(|p| layer_norm(&resid_pre, p));
        let h_in = ln1.as_ref().map(|c| &c.out).unwrap_or(&resid_pre);
        let mut q = h_in.dot(&blk.w_q);
        add_bias(&mut q, &blk.b_q);
        let mut k = h_in.dot(&blk.w_k);
        add_bias(&mut k, &blk.b_k);
        let mut v = h_in.dot(&blk.w_v);
        add_bias(&mut v, &blk.b_v);

        let mut scores = Array3::<T>::zeros((batch, seq_len, seq_len));
        let mut pattern = Array3::<T>::zeros((batch, seq_len, seq_len));
        let mut z = Array2::<T>::zeros((rows, cfg.d_head));
        for b in 0..batch {
            let r = b * seq_len..(b + 1) * seq_len;
            let qb = q.slice(s![r.clone(), ..]);
            let kb = k.slice(s![r.clone(), ..]);
            let vb = v.slice(s![r.clone(), ..]);
            let mut sc = qb.dot(&kb.t());
            sc *= scale;
            for i in 0..seq_len {
                for j in i + 1..seq_len {
                    sc[[i, j]] = neg_inf;
                }
            }
            if let Some(spec) = spec {
                for a in spec.at(l, Site::AttnScores) {
                    if a.batch_index.is_some_and(|bi| bi != b) {
                        continue;
                    }
                    if let ActionKind::BlockScores { keys } = &a.kind {
                        for &qp in &a.positions {
                            for &kp in keys {
                                sc[[qp, kp]] = neg_inf;
                            }
                        }
                    }
                }
            }
            let mut pat = sc.clone();
            for (i, mut row) in pat.outer_iter_mut().enumerate() {
                let m = row.iter().fold(neg_inf, |a, &b| a.max(b));
                if m == neg_inf {
                    return Err(Error::numeric(
                        format!("layer {l} attn-scores"),
                        format!("query {i} of sequence {b} has every key blocked"),
                    ));
                }
                row.mapv_inplace(|s| (s - m).exp());
                let sum = row.sum();
                row.mapv_inplace(|e| e / sum);
            }
            z.slice_mut(s![r, ..]).assign(&pat.dot(&vb));
            scores.index_axis_mut(Axis(0), b).assign(&sc);
            pattern.index_axis_mut(Axis(0), b).assign(&pat);
        }
        let mut attn_out = z.dot(&blk.w_o);
        add_bias(&mut attn_out, &blk.b_o);
        apply_row_edits(&mut attn_out, spec, l, Site::AttnOut, batch, seq_len);
        let resid_mid = &resid_pre + &attn_out;

        let ln2 = blk.ln2.as_ref().map(|p| layer_norm(&resid_mid, p));
        let m_in = ln2.as_ref().map(|c| &c.out).unwrap_or(&resid_mid);
        let mut mlp_pre = m_in.dot(&blk.w_in);
        add_bias(&mut mlp_pre, &blk.b_in);
        let mlp_act = mlp_pre.mapv(gelu);
        let mut mlp_out = mlp_act.dot(&blk.w_out);
        add_bias(&mut mlp_out, &blk.b_out);
        apply_row_edits(&mut mlp_out, spec, l, Site::MlpOut, batch, seq_len);
        let mut resid_post = &resid_mid + &mlp_out;
        apply_row_edits(&mut resid_post, spec, l, Site::ResidPost, batch, seq_len);

        x = resid_post.clone();
        layers.push(LayerCache {
            resid_pre,
            ln1,
            q,
            k,
            v,
            scores,
            pattern,
            z,
            attn_out,
            resid_mid,
            ln2,
            mlp_pre,
            mlp_act,
            mlp_out,
            resid_post,
        });
    }

    let final_norm = params.final_norm.as_ref().map(|p| layer_norm(&x, p));
    let xf = final_norm.as_ref().map(|c| &c.out).unwrap_or(&x);
    let mut logits = xf.dot(&params.unembed);
    add_bias(&mut logits, &params.unembed_bias);

    Ok(ActivationCache {
        batch,
        seq_len,
        tokens: tokens.iter().map(|t| t.to_vec()).collect(),
        layers,
        final_norm,
        logits,
    })
}

/// Single-sequence forward pass.
pub fn forward<T: Float>(
    params: &Parameters<T>,
    tokens: &[u32],
    spec: Option<&InterventionSpec<T>>,
) -> Result<ActivationCache<T>> {
    forward_batch(params, &[tokens], spec)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Float>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax<T: Float>(row: ArrayView1<'_, T>) -> Array1<T> {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    row.mapv(|v| v - lse)
}

/// Mean next-token cross-entropy (nats) over masked positions of one
/// sequence. `targets[i]` is the token expected after position `i`.
pub fn sequence_loss<T: Float>(logits: ArrayView2<'_, T>, targets: &[u32], loss_mask: &[bool]) -> Result<T> {
    if logits.nrows() != targets.len() || targets.len() != loss_mask.len() {
        return Err(Error::invalid("logits, targets and mask lengths differ"));
    }
    let mut total = T::zero();
    let mut n = 0usize;
    for (i, (&t, &m)) in targets.iter().zip(loss_mask).enumerate() {
        if m {
            total -= log_softmax(logits.row(i))[t as usize];
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    Ok(total / T::of(n as f64))
}

/// Checks `x^ℓ = x^{ℓ-1} + a^ℓ + m^ℓ` coordinate-wise; returns the worst
/// absolute deviation.
pub fn residual_decomposition_error<T: Float>(cache: &ActivationCache<T>) -> f64 {
    let mut worst = 0.0f64;
    for l in &cache.layers {
        Zip::from(&l.resid_post)
            .and(&l.resid_pre)
            .and(&l.attn_out)
            .and(&l.mlp_out)
            .for_each(|&post, &pre, &a, &m| {
                worst = worst.max((post - (pre + a + m)).abs().f64());
            });
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Norm};
    use crate::task::{encode_instance, generate_instance, EdgeOrder};

    fn model(norm: Norm) -> Parameters<f32> {
        let cfg = ModelConfig { norm, init_scale: 0.2, seed: 4, ..ModelConfig::reduced() };
        Parameters::init(&cfg).unwrap()
    }

    fn sample_tokens(seed: u64) -> Vec<u32> {
        encode_instance(&generate_instance(seed, 8, EdgeOrder::Shuffled).unwrap())
            .unwrap()
            .tokens
    }

    #[test]
    fn residual_stream_decomposes() {
        for norm in [Norm::None, Norm::PreLn] {
            let p = model(norm);
            let c = forward(&p, &sample_tokens(1), None).unwrap();
            assert!(residual_decomposition_error(&c) <= 1e-5);
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let p = model(Norm::None);
        let c = forward_batch(&p, &[&sample_tokens(1), &sample_tokens(2)], None).unwrap();
        for l in &c.layers {
            for b in 0..2 {
                let pat = l.pattern.index_axis(Axis(0), b);
                for (i, row) in pat.outer_iter().enumerate() {
                    assert!(row.iter().all(|&w| w >= 0.0));
                    assert!((row.sum() - 1.0).abs() <= 1e-6);
                    assert!(row.iter().skip(i + 1).all(|&w| w == 0.0));
                }
            }
        }
    }

    #[test]
    fn empty_spec_is_bit_identical() {
        let p = model(Norm::PreLn);
        let t = sample_tokens(3);
        let a = forward(&p, &t, None).unwrap();
        let b = forward(&p, &t, Some(&InterventionSpec::new())).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn replacing_with_own_activation_is_identity() {
        let p = model(Norm::None);
        let t = sample_tokens(3);
        let clean = forward(&p, &t, None).unwrap();
        let positions: Vec<usize> = (0..t.len()).step_by(3).collect();
        for site in [Site::ResidPre, Site::ResidPost, Site::AttnOut, Site::MlpOut] {
            for layer in 0..p.config.n_layers {
                let vals = clean.gather(layer, site, 0, &positions).unwrap();
                let spec = InterventionSpec::new().replace(layer, site, positions.clone(), vals);
                let patched = forward(&p, &t, Some(&spec)).unwrap();
                let diff = (&patched.logits - &clean.logits).mapv(f32::abs);
                assert!(diff.iter().all(|&d| d <= 1e-6), "{site:?} layer {layer}");
            }
        }
    }

    #[test]
    fn blocking_all_but_first_key_is_one_hot() {
        let p = model(Norm::None);
        let t = sample_tokens(5);
        let q = 10;
        let spec = InterventionSpec::new().block_scores(1, vec![q], (1..=q).collect());
        let c = forward(&p, &t, Some(&spec)).unwrap();
        let row = c.pattern(1, 0).row(q).to_owned();
        assert_eq!(row[0], 1.0);
        assert!(row.iter().skip(1).all(|&w| w == 0.0));
    }

    #[test]
    fn blocking_every_key_is_a_numeric_error() {
        let p = model(Norm::None);
        let t = sample_tokens(5);
        let spec = InterventionSpec::new().block_scores(0, vec![4], (0..=4).collect());
        assert!(matches!(forward(&p, &t, Some(&spec)), Err(Error::Numeric { .. })));
    }

    #[test]
    fn invalid_inputs() {
        let p = model(Norm::None);
        assert!(forward(&p, &[35], None).is_err());
        assert!(forward(&p, &[0; 32], None).is_err());
        let bad = InterventionSpec::new().replace(9, Site::AttnOut, vec![0], Array2::zeros((1, 64)));
        assert!(forward(&p, &[0, 1], Some(&bad)).is_err());
        let bad = InterventionSpec::<f32> {
            actions: vec![crate::model::Action {
                layer: 0,
                site: Site::MlpOut,
                positions: vec![0],
                kind: ActionKind::BlockScores { keys: vec![0] },
                batch_index: None,
            }],
        };
        assert!(forward(&p, &[0, 1], Some(&bad)).is_err());
    }

    #[test]
    fn zero_init_gives_flat_logits() {
        let cfg = ModelConfig { init_scale: 0.0, ..ModelConfig::reduced() };
        let p = Parameters::<f32>::init(&cfg).unwrap();
        let c = forward(&p, &sample_tokens(7), None).unwrap();
        for row in c.logits.outer_iter() {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn loss_values() {
        let flat = Array2::<f64>::zeros((3, 35));
        let l = sequence_loss(flat.view(), &[1, 2, 3], &[true, true, false]).unwrap();
        assert!((l - 35f64.ln()).abs() < 1e-12);
        assert!((l - 3.5553480614894135).abs() < 1e-12);

        let mut sharp = Array2::<f64>::zeros((2, 35));
        sharp[[0, 4]] = 30.0;
        sharp[[1, 4]] = 30.0;
        let l = sequence_loss(sharp.view(), &[4, 4], &[true, false]).unwrap();
        assert!(l < 1e-9);
        let l2 = sequence_loss(sharp.view(), &[4, 4], &[true, true]).unwrap();
        assert!((l - l2).abs() < 1e-15);

        assert!(sequence_loss(flat.view(), &[1, 2, 3], &[false; 3]).is_err());
    }
}
