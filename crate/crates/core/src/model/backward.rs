//! Reverse-mode gradients for the whole model, derived by hand.

use ndarray::{s, Array2, Axis};

use super::forward::{forward_batch, gelu_grad, log_softmax, NormCache};
use super::params::NormParams;
use super::{Float, Parameters};
use crate::task::TokenSequence;
use crate::{Error, Result};

/// A training batch cut down to the shortest length that still covers
/// every masked position.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub masks: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Self> {
        let last = seqs
            .iter()
            .filter_map(|s| s.loss_mask.iter().rposition(|&m| m))
            .max()
            .ok_or_else(|| Error::invalid("batch has no masked positions"))?;
        let len = last + 1;
        Ok(Batch {
            tokens: seqs.iter().map(|s| s.tokens[..len].to_vec()).collect(),
            targets: seqs.iter().map(|s| s.targets()[..len].to_vec()).collect(),
            masks: seqs.iter().map(|s| s.loss_mask[..len].to_vec()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_masked(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone)]
pub struct LossAndGrad<T> {
    /// Mean cross-entropy over every masked position in the batch.
    pub loss: T,
    pub grads: Parameters<T>,
}

fn layer_norm_backward<T: Float>(
    dy: &Array2<T>,
    cache: &NormCache<T>,
    p: &NormParams<T>,
    grad: &mut NormParams<T>,
) -> Array2<T> {
    grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * &p.gain;
    let d = T::of(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &r) in dx
        .outer_iter_mut()
        .zip(dxhat.outer_iter())
        .zip(cache.xhat.outer_iter())
        .zip(cache.rstd.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = r * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

fn check_finite<T: Float>(a: &Array2<T>, location: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(location(), "non-finite gradient"))
    }
}

/// Loss and parameter gradients for a batch. Contributions are summed in
/// a fixed order, so results are reproducible bit for bit.
pub fn loss_and_grad<T: Float>(params: &Parameters<T>, batch: &Batch) -> Result<LossAndGrad<T>> {
    let n_masked = batch.n_masked();
    if n_masked == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    let refs: Vec<&[u32]> = batch.tokens.iter().map(|t| t.as_slice()).collect();
    let cache = forward_batch(params, &refs, None)?;
    let (bsz, seq_len) = (cache.batch, cache.seq_len);
    let inv_n = T::one() / T::of(n_masked as f64);

    let mut loss = T::zero();
    let mut dlogits = Array2::<T>::zeros(cache.logits.raw_dim());
    for b in 0..bsz {
        for i in 0..seq_len {
            if !batch.masks[b][i] {
                continue;
            }
            let r = cache.row(b, i);
            let t = batch.targets[b][i] as usize;
            let lsm = log_softmax(cache.logits.row(r));
            loss -= lsm[t];
            let mut g = dlogits.row_mut(r);
            g.assign(&lsm.mapv(|v| v.exp() * inv_n));
            g[t] -= inv_n;
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(Error::numeric("loss", format!("loss is {loss}")));
    }

    let mut grads = params.zeros_like();
    let last = cache.layers.last().expect("at least one layer");
    let xf = cache.final_norm.as_ref().map(|c| &c.out).unwrap_or(&last.resid_post);
    grads.unembed = xf.t().dot(&dlogits);
    grads.unembed_bias = dlogits.sum_axis(Axis(0));
    let mut dx = dlogits.dot(&params.unembed.t());
    if let (Some(c), Some(p), Some(g)) = (&cache.final_norm, &params.final_norm, &mut grads.final_norm) {
        dx = layer_norm_backward(&dx, c, p, g);
    }
    check_finite(&dx, || "final-norm".into())?;

    let scale = T::one() / T::of((params.config.d_head as f64).sqrt());
    for (l, (lc, blk)) in cache.layers.iter().zip(&params.blocks).enumerate().rev() {
        let g = &mut grads.blocks[l];

        // MLP sublayer
        let d_mlp_out = &dx;
        g.w_out = lc.mlp_act.t().dot(d_mlp_out);
        g.b_out = d_mlp_out.sum_axis(Axis(0));
        let mut d_pre = d_mlp_out.dot(&blk.w_out.t());
        d_pre.zip_mut_with(&lc.mlp_pre, |d, &x| *d *= gelu_grad(x));
        let m_in = lc.ln2.as_ref().map(|c| &c.out).unwrap_or(&lc.resid_mid);
        g.w_in = m_in.t().dot(&d_pre);
        g.b_in = d_pre.sum_axis(Axis(0));
        let mut d_m_in = d_pre.dot(&blk.w_in.t());
        if let (Some(c), Some(p), Some(gn)) = (&lc.ln2, &blk.ln2, &mut g.ln2) {
            d_m_in = layer_norm_backward(&d_m_in, c, p, gn);
        }
        let d_mid = &dx + &d_m_in;
        check_finite(&d_mid, || format!("layer {l} mlp"))?;

        // attention sublayer
        g.w_o = lc.z.t().dot(&d_mid);
        g.b_o = d_mid.sum_axis(Axis(0));
        let dz = d_mid.dot(&blk.w_o.t());
        let mut dq = Array2::<T>::zeros(lc.q.raw_dim());
        let mut dk = Array2::<T>::zeros(lc.k.raw_dim());
        let mut dv = Array2::<T>::zeros(lc.v.raw_dim());
        for b in 0..bsz {
            let r = b * seq_len..(b + 1) * seq_len;
            let pat = lc.pattern.index_axis(Axis(0), b);
            let dzb = dz.slice(s![r.clone(), ..]);
            let vb = lc.v.slice(s![r.clone(), ..]);
            let qb = lc.q.slice(s![r.clone(), ..]);
            let kb = lc.k.slice(s![r.clone(), ..]);
            let dp = dzb.dot(&vb.t());
            dv.slice_mut(s![r.clone(), ..]).assign(&pat.t().dot(&dzb));
            let mut ds = Array2::<T>::zeros((seq_len, seq_len));
            for i in 0..seq_len {
                let pr = pat.row(i);
                let dpr = dp.row(i);
                let dot: T = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..=i {
                    ds[[i, j]] = pr[j] * (dpr[j] - dot) * scale;
                }
            }
            dq.slice_mut(s![r.clone(), ..]).assign(&ds.dot(&kb));
            dk.slice_mut(s![r, ..]).assign(&ds.t().dot(&qb));
        }
        let h_in = lc.ln1.as_ref().map(|c| &c.out).unwrap_or(&lc.resid_pre);
        let h_t = h_in.t();
        g.w_q = h_t.dot(&dq);
        g.b_q = dq.sum_axis(Axis(0));
        g.w_k = h_t.dot(&dk);
        g.b_k = dk.sum_axis(Axis(0));
        g.w_v = h_t.dot(&dv);
        g.b_v = dv.sum_axis(Axis(0));
        let mut d_h = dq.dot(&blk.w_q.t());
        d_h += &dk.dot(&blk.w_k.t());
        d_h += &dv.dot(&blk.w_v.t());
        if let (Some(c), Some(p), Some(gn)) = (&lc.ln1, &blk.ln1, &mut g.ln1) {
            d_h = layer_norm_backward(&d_h, c, p, gn);
        }
        dx = d_mid + d_h;
        check_finite(&dx, || format!("layer {l} attention"))?;
    }

    for (b, seq) in batch.tokens.iter().enumerate() {
        for (i, &t) in seq.iter().enumerate() {
            let row = dx.row(b * seq_len + i);
            let mut e = grads.embed.row_mut(t as usize);
            e += &row;
            let mut p = grads.pos_embed.row_mut(i);
            p += &row;
        }
    }
    Ok(LossAndGrad { loss, grads })
}

/// Convenience wrapper over token sequences.
pub fn backward_pass<T: Float>(params: &Parameters<T>, seqs: &[&TokenSequence]) -> Result<LossAndGrad<T>> {
    loss_and_grad(params, &Batch::from_sequences(seqs)?)
}

/// Mean loss only, with no gradient bookkeeping.
pub fn batch_loss<T: Float>(params: &Parameters<T>, batch: &Batch) -> Result<T> {
    let refs: Vec<&[u32]> = batch.tokens.iter().map(|t| t.as_slice()).collect();
    let cache = forward_batch(params, &refs, None)?;
    let mut loss = T::zero();
    let mut n = 0usize;
    for b in 0..cache.batch {
        for i in 0..cache.seq_len {
            if batch.masks[b][i] {
                loss -= log_softmax(cache.logits_at(b, i))[batch.targets[b][i] as usize];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    Ok(loss / T::of(n as f64))
}
