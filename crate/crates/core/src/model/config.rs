use serde::{Deserialize, Serialize};

use crate::task::{Layout, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    None,
    /// LayerNorm before each sublayer and before the unembedding.
    PreLn,
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Norm::None),
            "preln" | "pre-ln" => Ok(Norm::PreLn),
            other => Err(Error::invalid(format!("unknown norm {other:?}"))),
        }
    }
}

/// Architecture hyperparameters. Defaults are the 6-layer, 128-wide,
/// single-head model used for 16-node trees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub norm: Norm,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 1,
            d_model: 128,
            d_head: 128,
            d_mlp: 512,
            vocab_size: Vocabulary::SIZE,
            context_len: 63,
            norm: Norm::None,
            init_scale: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The smaller model used for 8-node trees.
    pub fn reduced() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            d_head: 64,
            d_mlp: 256,
            context_len: Layout::new(8).unwrap().context_len(),
            ..Default::default()
        }
    }

    /// Tiny double-precision-friendly model for gradient verification.
    pub fn tiny(n_layers: usize, d_model: usize, norm: Norm) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            d_head: d_model,
            d_mlp: 4 * d_model,
            context_len: 15,
            norm,
            init_scale: 0.3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::invalid(format!(
                "n_heads * d_head = {} must equal d_model = {}",
                self.n_heads * self.d_head,
                self.d_model
            )));
        }
        if self.n_heads != 1 {
            return Err(Error::invalid("only single-head attention is supported"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::invalid("init_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_architecture() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.n_layers, c.d_model, c.d_mlp, c.vocab_size, c.context_len), (6, 128, 512, 35, 63));
        let r = ModelConfig::reduced();
        r.validate().unwrap();
        assert_eq!(r.context_len, 31);
    }

    #[test]
    fn rejects_inconsistent_heads() {
        let c = ModelConfig { d_head: 64, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { d_mlp: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
