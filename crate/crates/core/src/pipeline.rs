//! End-to-end separation of one mixture: frame, embed, build the graph,
//! fit the assignment head, harden, mask and reconstruct.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::dsp::{frame, FrameMatrix, Waveform, DEFAULT_FRAME_LEN, DEFAULT_HOP};
use crate::encoder::{encode, EmbeddingMatrix, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{build_graph, partition_scores, PartitionScores, SimilarityGraph};
use crate::head::{
    assign, fit_mixture, harden, merge_columns, AssignmentMatrix, HeadConfig, HeadInput, HeadSample, Hardened,
};
use crate::separation::{apply_masks, masks_from_partition, MaskSet};

/// Which head clusters the frame graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// MLP over the contrastive embeddings.
    ContrastiveMlp,
    /// Graph convolution over unit-norm raw frames, then the MLP.
    GcnMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub theta: f64,
    pub method: Method,
    pub head: HeadConfig,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            frame_len: DEFAULT_FRAME_LEN,
            hop: DEFAULT_HOP,
            theta: 0.5,
            method: Method::ContrastiveMlp,
            head: HeadConfig::default(),
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::Argument("need 0 < hop <= frame_len".into()));
        }
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(Error::Argument(format!("theta {} outside [-1, 1]", self.theta)));
        }
        self.head.validate()
    }
}

/// Frames, embeddings and similarity graph of one mixture.
#[derive(Debug, Clone)]
pub struct MixtureGraph {
    pub frames: FrameMatrix,
    pub embeddings: EmbeddingMatrix,
    pub graph: SimilarityGraph,
}

pub fn mixture_graph(
    mixture: &Waveform,
    encoder: &EncoderConfig,
    encoder_params: &ParamStore,
    config: &SeparatorConfig,
) -> Result<MixtureGraph> {
    config.validate()?;
    if encoder.frame_len != config.frame_len {
        return Err(Error::Argument(format!(
            "encoder expects {}-sample frames, separator frames at {}",
            encoder.frame_len, config.frame_len
        )));
    }
    let frames = frame(mixture, config.frame_len, config.hop)?;
    let embeddings = encode(encoder, encoder_params, &frames)?;
    let graph = build_graph(&embeddings, config.theta)?;
    Ok(MixtureGraph {
        frames,
        embeddings,
        graph,
    })
}

/// Frames scaled to unit norm; silent frames stay zero.
fn normalized_frames(frames: &FrameMatrix) -> Tensor {
    let mut t = frames.to_tensor();
    for row in t.data_mut().chunks_mut(frames.frame_len()) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    t
}

/// Head input for `method` over a mixture graph.
pub fn head_sample(mg: &MixtureGraph, method: Method) -> Result<HeadSample> {
    let input = match method {
        Method::ContrastiveMlp => HeadInput::Mlp {
            features: mg.embeddings.as_tensor().clone(),
        },
        Method::GcnMlp => HeadInput::Gcn {
            adjacency: Arc::new(mg.graph.normalized_adjacency()),
            features: normalized_frames(&mg.frames),
        },
    };
    HeadSample::new(input, &mg.graph)
}

/// Everything produced while separating one mixture.
#[derive(Debug, Clone)]
pub struct Separation {
    pub mixture_graph: MixtureGraph,
    pub assignments: AssignmentMatrix,
    pub head_trace: Vec<f64>,
    pub hardened: Hardened,
    pub masks: MaskSet,
    pub estimates: Vec<Waveform>,
    pub scores: PartitionScores,
    /// Largest absolute deviation of the summed estimates from the mixture.
    pub reconstruction_error: f64,
}

impl Separation {
    pub fn k_eff(&self) -> usize {
        self.hardened.k_eff()
    }
}

/// Merges near-duplicate soft columns, hardens, and turns the partition
/// into estimates and graph scores.
pub fn finish_separation(
    mixture: &Waveform,
    mixture_graph: MixtureGraph,
    assignments: AssignmentMatrix,
    head_trace: Vec<f64>,
    head: &HeadConfig,
) -> Result<Separation> {
    let hardened = harden(&merge_columns(&assignments, head.merge_similarity)?, head.min_frac)?;
    let masks = masks_from_partition(&hardened.partition)?;
    let estimates = apply_masks(mixture, &mixture_graph.frames, &masks)?;
    let reconstruction_error = (0..mixture.len())
        .map(|t| {
            let sum: f64 = estimates.iter().map(|e| e.samples()[t]).sum();
            (sum - mixture.samples()[t]).abs()
        })
        .fold(0.0, f64::max);
    let scores = partition_scores(&mixture_graph.graph, &hardened.partition)?;
    Ok(Separation {
        mixture_graph,
        assignments,
        head_trace,
        hardened,
        masks,
        estimates,
        scores,
        reconstruction_error,
    })
}

/// Fully unsupervised separation with a head fitted to this mixture alone.
pub fn separate(
    mixture: &Waveform,
    encoder: &EncoderConfig,
    encoder_params: &ParamStore,
    config: &SeparatorConfig,
    seed: u64,
) -> Result<Separation> {
    let mg = mixture_graph(mixture, encoder, encoder_params, config)?;
    let sample = head_sample(&mg, config.method)?;
    let fit = fit_mixture(&sample, &config.head, seed)?;
    finish_separation(mixture, mg, fit.assignments, fit.trace, &config.head)
}

/// Separation with an already trained (amortized) head: forward pass only.
pub fn separate_with_head(
    mixture: &Waveform,
    encoder: &EncoderConfig,
    encoder_params: &ParamStore,
    head_params: &ParamStore,
    config: &SeparatorConfig,
) -> Result<Separation> {
    let mg = mixture_graph(mixture, encoder, encoder_params, config)?;
    let sample = head_sample(&mg, config.method)?;
    let assignments = assign(head_params, &sample.input)?;
    finish_separation(mixture, mg, assignments, Vec::new(), &config.head)
}
