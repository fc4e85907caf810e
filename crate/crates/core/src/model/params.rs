use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Float, ModelConfig, Norm};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

impl<T: Float> NormParams<T> {
    fn identity(d: usize) -> Self {
        NormParams {
            gain: Array1::from_elem(d, T::one()),
            bias: Array1::zeros(d),
        }
    }
}

/// Weights of one transformer block. Matrices are stored input-major, so a
/// row vector `x` maps to `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: Option<NormParams<T>>,
    pub w_q: Array2<T>,
    pub b_q: Array1<T>,
    pub w_k: Array2<T>,
    pub b_k: Array1<T>,
    pub w_v: Array2<T>,
    pub b_v: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    pub ln2: Option<NormParams<T>>,
    pub w_in: Array2<T>,
    pub b_in: Array1<T>,
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    /// vocab × d
    pub embed: Array2<T>,
    /// context × d
    pub pos_embed: Array2<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Option<NormParams<T>>,
    /// d × vocab
    pub unembed: Array2<T>,
    pub unembed_bias: Array1<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub kind: TensorKind,
    pub data: &'a mut [T],
}

macro_rules! visit_params {
    ($self:ident, $push:ident, $as_slice:ident, $iter:ident, $opt:ident) => {{
        use TensorKind::*;
        $push("embed".into(), Weight, &$self.embed.shape().to_vec(), $self.embed.$as_slice().unwrap());
        $push("pos_embed".into(), Weight, &$self.pos_embed.shape().to_vec(), $self.pos_embed.$as_slice().unwrap());
        for (i, b) in $self.blocks.$iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            if let Some(n) = b.ln1.$opt() {
                $push(p("ln1.gain"), Gain, &n.gain.shape().to_vec(), n.gain.$as_slice().unwrap());
                $push(p("ln1.bias"), Bias, &n.bias.shape().to_vec(), n.bias.$as_slice().unwrap());
            }
            $push(p("w_q"), Weight, &b.w_q.shape().to_vec(), b.w_q.$as_slice().unwrap());
            $push(p("b_q"), Bias, &b.b_q.shape().to_vec(), b.b_q.$as_slice().unwrap());
            $push(p("w_k"), Weight, &b.w_k.shape().to_vec(), b.w_k.$as_slice().unwrap());
            $push(p("b_k"), Bias, &b.b_k.shape().to_vec(), b.b_k.$as_slice().unwrap());
            $push(p("w_v"), Weight, &b.w_v.shape().to_vec(), b.w_v.$as_slice().unwrap());
            $push(p("b_v"), Bias, &b.b_v.shape().to_vec(), b.b_v.$as_slice().unwrap());
            $push(p("w_o"), Weight, &b.w_o.shape().to_vec(), b.w_o.$as_slice().unwrap());
            $push(p("b_o"), Bias, &b.b_o.shape().to_vec(), b.b_o.$as_slice().unwrap());
            if let Some(n) = b.ln2.$opt() {
                $push(p("ln2.gain"), Gain, &n.gain.shape().to_vec(), n.gain.$as_slice().unwrap());
                $push(p("ln2.bias"), Bias, &n.bias.shape().to_vec(), n.bias.$as_slice().unwrap());
            }
            $push(p("w_in"), Weight, &b.w_in.shape().to_vec(), b.w_in.$as_slice().unwrap());
            $push(p("b_in"), Bias, &b.b_in.shape().to_vec(), b.b_in.$as_slice().unwrap());
            $push(p("w_out"), Weight, &b.w_out.shape().to_vec(), b.w_out.$as_slice().unwrap());
            $push(p("b_out"), Bias, &b.b_out.shape().to_vec(), b.b_out.$as_slice().unwrap());
        }
        if let Some(n) = $self.final_norm.$opt() {
            $push("final_norm.gain".into(), Gain, &n.gain.shape().to_vec(), n.gain.$as_slice().unwrap());
            $push("final_norm.bias".into(), Bias, &n.bias.shape().to_vec(), n.bias.$as_slice().unwrap());
        }
        $push("unembed".into(), Weight, &$self.unembed.shape().to_vec(), $self.unembed.$as_slice().unwrap());
        $push("unembed_bias".into(), Bias, &$self.unembed_bias.shape().to_vec(), $self.unembed_bias.$as_slice().unwrap());
    }};
}

impl<T: Float> Parameters<T> {
    /// All-zero parameters with norm gains at one.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, dh, ff, v, c) = (
            config.d_model,
            config.d_head,
            config.d_mlp,
            config.vocab_size,
            config.context_len,
        );
        let ln = || match config.norm {
            Norm::None => None,
            Norm::PreLn => Some(NormParams::identity(d)),
        };
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1: ln(),
                w_q: Array2::zeros((d, dh)),
                b_q: Array1::zeros(dh),
                w_k: Array2::zeros((d, dh)),
                b_k: Array1::zeros(dh),
                w_v: Array2::zeros((d, dh)),
                b_v: Array1::zeros(dh),
                w_o: Array2::zeros((dh, d)),
                b_o: Array1::zeros(d),
                ln2: ln(),
                w_in: Array2::zeros((d, ff)),
                b_in: Array1::zeros(ff),
                w_out: Array2::zeros((ff, d)),
                b_out: Array1::zeros(d),
            })
            .collect();
        Ok(Parameters {
            config: *config,
            embed: Array2::zeros((v, d)),
            pos_embed: Array2::zeros((c, d)),
            blocks,
            final_norm: ln(),
            unembed: Array2::zeros((d, v)),
            unembed_bias: Array1::zeros(v),
        })
    }

    /// Same shapes as `self`, all zeros (gains included); used for
    /// gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(T::zero());
        }
        z
    }

    /// Weights ~ N(0, init_scale²) drawn in tensor order from a ChaCha8
    /// stream seeded by `config.seed`; biases zero, gains one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_scale).map_err(|e| Error::invalid(e.to_string()))?;
        for t in p.tensors_mut() {
            if t.kind == TensorKind::Weight {
                for x in t.data.iter_mut() {
                    *x = T::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(p)
    }

    fn visit<'a>(&'a self, push: &mut dyn FnMut(String, TensorKind, Vec<usize>, &'a [T])) {
        let mut push = |name: String, kind: TensorKind, shape: &Vec<usize>, data: &'a [T]| {
            push(name, kind, shape.clone(), data)
        };
        visit_params!(self, push, as_slice, iter, as_ref);
    }

    fn visit_mut<'a>(&'a mut self, push: &mut dyn FnMut(String, TensorKind, &'a mut [T])) {
        let mut push =
            |name: String, kind: TensorKind, _shape: &Vec<usize>, data: &'a mut [T]| push(name, kind, data);
        visit_params!(self, push, as_slice_mut, iter_mut, as_mut);
    }

    /// Every tensor in a fixed order (also the checkpoint directory order).
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        self.visit(&mut |name, kind, shape, data| out.push(TensorRef { name, shape, kind, data }));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        self.visit_mut(&mut |name, kind, data| out.push(TensorMut { name, kind, data }));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Converts every tensor to another float width.
    pub fn cast<U: Float>(&self) -> Parameters<U> {
        let mut out = Parameters::<U>::zeros(&self.config).expect("config already validated");
        for (src, dst) in self.tensors().iter().zip(out.tensors_mut()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = U::of(s.f64());
            }
        }
        out
    }

    /// Σ over tensors of Σ x², in f64.
    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x.f64() * x.f64())
            .sum()
    }

    /// self += other
    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += *s;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_FORMAT: &str = "backchain-checkpoint-v1";

impl Parameters<f32> {
    /// Serializes as one JSON header line followed by the tensors as raw
    /// little-endian f32 in directory order.
    pub fn to_checkpoint_bytes(&self, step: u64) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for t in self.tensors() {
            tensors.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                dtype: "f32".into(),
            });
            offset += 4 * t.data.len();
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config,
            seed: self.config.seed,
            step,
            tensors,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(offset);
        for t in self.tensors() {
            for x in t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_checkpoint_bytes(step)?)?;
        f.flush()?;
        Ok(())
    }

    /// Returns the parameters and the step stored in the header.
    pub fn from_checkpoint_reader(mut r: impl BufRead) -> Result<(Self, u64)> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        let header: CheckpointHeader = serde_json::from_slice(&line)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown format {:?}", header.format)));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut params = Parameters::<f32>::zeros(&header.config)?;
        let entries = header.tensors;
        let mut dst = params.tensors_mut();
        if entries.len() != dst.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                dst.len(),
                entries.len()
            )));
        }
        for (e, t) in entries.iter().zip(dst.iter_mut()) {
            if e.name != t.name || e.dtype != "f32" {
                return Err(Error::Format(format!("unexpected tensor {} ({})", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if n != t.data.len() {
                return Err(Error::Format(format!("shape mismatch for {}", e.name)));
            }
            let bytes = data
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| Error::Format(format!("truncated data for {}", e.name)))?;
            for (x, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        drop(dst);
        Ok((params, header.step))
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint_reader(f)
    }

    pub fn digest(&self) -> String {
        crate::digest::sha256_hex(&self.to_checkpoint_bytes(0).expect("serializable"))
    }
}
