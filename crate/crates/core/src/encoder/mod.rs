//! Frame encoder trained by contrastive learning over same-speaker frame pairs.
//!
//! Each of the stacked stages is `LayerNorm → Conv1D → ReLU → MaxPool`; a
//! final linear projection maps the flattened feature map to the embedding
//! dimension and rows are L2-normalized.

mod loss;
mod pairs;
mod pretrain;

pub use loss::{contrastive_loss, contrastive_loss_value};
pub use pairs::{sample_pairs, sample_pairs_with, PairBatch, SpeakerFrames};
pub use pretrain::{
    continue_training, pretrain, pretrain_with, read_trace_csv, write_trace_csv, PretrainConfig,
    Pretrained, TraceRow,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{uniform_init, ParamStore, Tape, Tensor, Var};
use crate::dsp::{FrameMatrix, DEFAULT_FRAME_LEN};
use crate::error::{Error, Result};

const ENCODE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub frame_len: usize,
    pub layers: Vec<LayerSpec>,
    pub embed_dim: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_base_filters(32)
    }
}

impl EncoderConfig {
    /// Six stages with `base · 2^min(l, 2)` filters, kernel 3, stride 1 and
    /// 2/2 max pooling, projecting to 128 dimensions.
    pub fn with_base_filters(base: usize) -> Self {
        let layers = (0..6)
            .map(|l| LayerSpec {
                filters: base << l.min(2),
                kernel: 3,
                stride: 1,
                pool_size: 2,
                pool_stride: 2,
            })
            .collect();
        Self {
            frame_len: DEFAULT_FRAME_LEN,
            layers,
            embed_dim: 128,
            layer_norm_eps: 1e-5,
        }
    }

    fn padding(spec: &LayerSpec) -> usize {
        (spec.kernel - 1) / 2
    }

    /// Temporal length after each stage.
    pub fn stage_lengths(&self) -> Result<Vec<usize>> {
        let mut len = self.frame_len;
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.filters == 0
                || spec.kernel == 0
                || spec.stride == 0
                || spec.pool_size == 0
                || spec.pool_stride == 0
            {
                return Err(Error::Argument(format!("layer {l}: sizes and strides must be >= 1")));
            }
            let padded = len + 2 * Self::padding(spec);
            if padded < spec.kernel {
                return Err(Error::Argument(format!("layer {l}: input length {len} too short")));
            }
            let conv = (padded - spec.kernel) / spec.stride + 1;
            if conv < spec.pool_size {
                return Err(Error::Argument(format!("layer {l}: length {conv} shorter than pool")));
            }
            len = (conv - spec.pool_size) / spec.pool_stride + 1;
            out.push(len);
        }
        Ok(out)
    }

    /// Width of the flattened feature map fed to the projection.
    pub fn flat_dim(&self) -> Result<usize> {
        let lengths = self.stage_lengths()?;
        let channels = self.layers.last().map_or(1, |l| l.filters);
        Ok(channels * lengths.last().copied().unwrap_or(self.frame_len))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument("encoder needs at least one layer".into()));
        }
        if self.embed_dim == 0 || self.frame_len == 0 {
            return Err(Error::Argument("frame_len and embed_dim must be positive".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Argument("layer_norm_eps must be positive".into()));
        }
        self.flat_dim().map(|_| ())
    }
}

fn conv_weight(l: usize) -> String {
    format!("encoder.conv{l}.weight")
}

fn conv_bias(l: usize) -> String {
    format!("encoder.conv{l}.bias")
}

const PROJ_WEIGHT: &str = "encoder.proj.weight";
const PROJ_BIAS: &str = "encoder.proj.bias";

/// Fresh encoder parameters, uniformly initialized from `seed`.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut in_ch = 1;
    for (l, spec) in config.layers.iter().enumerate() {
        let fan_in = in_ch * spec.kernel;
        store.insert(&conv_weight(l), uniform_init(&mut rng, &[spec.filters, in_ch, spec.kernel], fan_in))?;
        store.insert(&conv_bias(l), uniform_init(&mut rng, &[spec.filters], fan_in))?;
        in_ch = spec.filters;
    }
    let flat = config.flat_dim()?;
    store.insert(PROJ_WEIGHT, uniform_init(&mut rng, &[flat, config.embed_dim], flat))?;
    store.insert(PROJ_BIAS, uniform_init(&mut rng, &[config.embed_dim], flat))?;
    Ok(store)
}

/// Encoder parameters bound onto a tape.
pub struct EncoderVars {
    convs: Vec<(Var, Var)>,
    proj: (Var, Var),
}

impl EncoderVars {
    /// Binds parameters as trainable leaves (`trainable`) or constants.
    pub fn bind(tape: &mut Tape, store: &ParamStore, config: &EncoderConfig, trainable: bool) -> Result<Self> {
        let load = |tape: &mut Tape, name: &str| {
            if trainable {
                tape.param(store, name)
            } else {
                tape.frozen_param(store, name)
            }
        };
        let convs = (0..config.layers.len())
            .map(|l| Ok((load(tape, &conv_weight(l))?, load(tape, &conv_bias(l))?)))
            .collect::<Result<Vec<_>>>()?;
        let proj = (load(tape, PROJ_WEIGHT)?, load(tape, PROJ_BIAS)?);
        Ok(Self { convs, proj })
    }
}

/// Forward pass over a `(batch, frame_len)` input; returns unit-norm rows.
pub fn forward(tape: &mut Tape, config: &EncoderConfig, vars: &EncoderVars, frames: Var) -> Result<Var> {
    let (batch, width) = tape.value(frames).dims2()?;
    if width != config.frame_len {
        return Err(Error::Shape(format!(
            "frames are {width} samples wide, encoder expects {}",
            config.frame_len
        )));
    }
    let mut h = tape.reshape(frames, &[batch, 1, width])?;
    for (spec, &(w, b)) in config.layers.iter().zip(&vars.convs) {
        h = tape.layer_norm(h, config.layer_norm_eps)?;
        h = tape.conv1d(h, w, Some(b), spec.stride, EncoderConfig::padding(spec))?;
        h = tape.relu(h)?;
        h = tape.maxpool1d(h, spec.pool_size, spec.pool_stride)?;
    }
    let flat = tape.value(h).len() / batch;
    let h = tape.reshape(h, &[batch, flat])?;
    let h = tape.matmul(h, vars.proj.0)?;
    let h = tape.add_row_bias(h, vars.proj.1)?;
    tape.l2_normalize_rows(h)
}

/// Unit-norm frame representations, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Tensor);

impl EmbeddingMatrix {
    /// Wraps an `n×d` tensor, normalizing its rows to unit length.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (_, d) = t.dims2()?;
        let mut t = t;
        for row in t.data_mut().chunks_mut(d.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Argument("embedding row with zero or non-finite norm".into()));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        Ok(Self(t))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::from_tensor(Tensor::from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    /// Rows with the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> EmbeddingMatrix {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix(Tensor::new(vec![idx.len(), d], data).expect("consistent shape"))
    }
}

/// Embeds every row of `frames` (`n × frame_len`).
pub fn encode_tensor(config: &EncoderConfig, store: &ParamStore, frames: &Tensor) -> Result<EmbeddingMatrix> {
    let (n, width) = frames.dims2()?;
    if width != config.frame_len {
        return Err(Error::Shape(format!(
            "frames are {width} samples wide, encoder expects {}",
            config.frame_len
        )));
    }
    let mut out = Vec::with_capacity(n * config.embed_dim);
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let end = (start + ENCODE_CHUNK).min(n);
        let chunk = Tensor::new(vec![end - start, width], frames.data()[start * width..end * width].to_vec())?;
        let mut tape = Tape::new();
        let vars = EncoderVars::bind(&mut tape, store, config, false)?;
        let x = tape.constant(chunk);
        let y = forward(&mut tape, config, &vars, x)?;
        out.extend_from_slice(tape.value(y).data());
    }
    let t = Tensor::new(vec![n, config.embed_dim], out)?;
    if !t.all_finite() {
        return Err(Error::Argument("encoder produced non-finite embeddings".into()));
    }
    Ok(EmbeddingMatrix(t))
}

/// Embeds every frame of a [`FrameMatrix`].
pub fn encode(config: &EncoderConfig, store: &ParamStore, frames: &FrameMatrix) -> Result<EmbeddingMatrix> {
    encode_tensor(config, store, &frames.to_tensor())
}
