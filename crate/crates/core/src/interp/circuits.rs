use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::model::{gelu, Norm, Parameters};
use crate::task::Vocabulary;
use crate::{Error, Result};

/// Number of node tokens (source and target forms).
pub const NODE_TOKENS: usize = 2 * crate::task::MAX_NODES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitMatrices {
    /// Positional QK pattern of block 0 (context × context).
    pub m0: Array2<f64>,
    /// Token QK interaction of block 1 over node tokens (32 × 32).
    pub m1: Array2<f64>,
    /// Position-to-token subgoal preference (context × vocab).
    pub rp: Array2<f64>,
}

/// With pre-LN the products ignore the normalization, which is only an
/// approximation; callers have to opt in.
fn require_exact(params: &Parameters<f32>, approximate: bool) -> Result<()> {
    if params.config.norm == Norm::PreLn && !approximate {
        return Err(Error::precondition(
            "circuit matrices are exact only without normalization; pass the approximation flag",
        ));
    }
    Ok(())
}

fn f64s(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

/// `M0 = (W_P W_Q⁰)(W_P W_K⁰)ᵀ`: which key positions each query position
/// prefers in block 0, from positional embeddings alone.
pub fn qk_circuit_m0(params: &Parameters<f32>, approximate: bool) -> Result<Array2<f64>> {
    require_exact(params, approximate)?;
    let p = f64s(&params.pos_embed);
    let b = &params.blocks[0];
    Ok(p.dot(&f64s(&b.w_q)).dot(&p.dot(&f64s(&b.w_k)).t()))
}

/// `M1 = (MLP⁰(E W_OV⁰) + E W_OV⁰) W_Q¹ (E W_K¹)ᵀ` over node tokens: query
/// rows are token embeddings after passing through block 0's value path,
/// key columns are raw token embeddings.
pub fn qk_circuit_m1(params: &Parameters<f32>, approximate: bool) -> Result<Array2<f64>> {
    require_exact(params, approximate)?;
    if params.blocks.len() < 2 {
        return Err(Error::precondition("M1 needs at least two blocks"));
    }
    let e = f64s(&params.embed).slice(s![..NODE_TOKENS, ..]).to_owned();
    let b0 = &params.blocks[0];
    let b1 = &params.blocks[1];
    let ov = e.dot(&f64s(&b0.w_v)).dot(&f64s(&b0.w_o));
    let mut hidden = ov.dot(&f64s(&b0.w_in)) + &b0.b_in.mapv(f64::from);
    hidden.mapv_inplace(gelu);
    let mlp = hidden.dot(&f64s(&b0.w_out)) + &b0.b_out.mapv(f64::from);
    let query = (mlp + &ov).dot(&f64s(&b1.w_q));
    let key = e.dot(&f64s(&b1.w_k));
    Ok(query.dot(&key.t()))
}

/// `R_P = (W_P W_Q)(W_E W_K)ᵀ` for block `layer`: each row shows which
/// token a position's query prefers on positional grounds.
pub fn subgoal_matrix_rp(params: &Parameters<f32>, layer: usize, approximate: bool) -> Result<Array2<f64>> {
    require_exact(params, approximate)?;
    let b = params
        .blocks
        .get(layer)
        .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
    let p = f64s(&params.pos_embed);
    let e = f64s(&params.embed);
    Ok(p.dot(&f64s(&b.w_q)).dot(&e.dot(&f64s(&b.w_k)).t()))
}

pub fn circuit_matrices(params: &Parameters<f32>, rp_layer: usize, approximate: bool) -> Result<CircuitMatrices> {
    Ok(CircuitMatrices {
        m0: qk_circuit_m0(params, approximate)?,
        m1: qk_circuit_m1(params, approximate)?,
        rp: subgoal_matrix_rp(params, rp_layer, approximate)?,
    })
}

/// Column index of the row maximum, restricted to keys at or before the
/// row (the causal half), earliest on ties.
pub fn causal_row_argmax(m: &Array2<f64>, row: usize) -> usize {
    let r = m.row(row);
    let mut best = 0;
    for j in 0..=row.min(r.len() - 1) {
        if r[j] > r[best] {
            best = j;
        }
    }
    best
}

/// Source-node token with the largest `R_P` entry for a position.
pub fn preferred_subgoal(rp: &Array2<f64>, position: usize) -> usize {
    let r = rp.row(position);
    (0..crate::task::MAX_NODES)
        .max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a)))
        .map(|t| Vocabulary::node_of(t as u32).unwrap())
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn shapes_and_repeatability() {
        let p = Parameters::<f32>::init(&ModelConfig::default()).unwrap();
        let a = circuit_matrices(&p, 0, false).unwrap();
        assert_eq!(a.m0.dim(), (63, 63));
        assert_eq!(a.m1.dim(), (32, 32));
        assert_eq!(a.rp.dim(), (63, 35));
        let b = circuit_matrices(&p, 0, false).unwrap();
        assert_eq!(a.m0, b.m0);
        assert_eq!(a.m1, b.m1);
        assert_eq!(a.rp, b.rp);
    }

    #[test]
    fn pre_ln_requires_the_flag() {
        let cfg = ModelConfig { norm: Norm::PreLn, ..ModelConfig::tiny(2, 8, Norm::PreLn) };
        let p = Parameters::<f32>::init(&cfg).unwrap();
        assert!(matches!(qk_circuit_m0(&p, false), Err(Error::Precondition(_))));
        assert!(qk_circuit_m0(&p, true).is_ok());
    }

    #[test]
    fn m0_matches_a_direct_bilinear_form() {
        let p = Parameters::<f32>::init(&ModelConfig::tiny(2, 8, Norm::None)).unwrap();
        let m0 = qk_circuit_m0(&p, false).unwrap();
        let (i, j) = (5, 3);
        let q = f64s(&p.pos_embed).row(i).dot(&f64s(&p.blocks[0].w_q));
        let k = f64s(&p.pos_embed).row(j).dot(&f64s(&p.blocks[0].w_k));
        assert!((m0[[i, j]] - q.dot(&k)).abs() < 1e-12);
    }
}
