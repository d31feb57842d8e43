//! Waveforms, framing and overlap-add reconstruction, mixing, and the
//! synthetic multi-speaker corpus.

mod synth;
mod wav;

pub use synth::{
    speaker_bank, synth_mixture, synth_utterance, ActivityInterval, MixtureRecord, SpeakerSpec,
    DEFAULT_GAIN_DB_RANGE, DEFAULT_OVERLAP_FRACTION,
};
pub use wav::{read_wav, write_wav};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
pub const DEFAULT_FRAME_LEN: usize = 256;
pub const DEFAULT_HOP: usize = 64;

/// Mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// The first `len` samples.
    pub fn truncated(&self, len: usize) -> Waveform {
        Waveform {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, factor: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|v| v * factor).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Equally sized, regularly spaced slices of a waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    data: Vec<f64>,
    n_frames: usize,
    frame_len: usize,
    hop: usize,
    source_len: usize,
    sample_rate: u32,
}

impl FrameMatrix {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Number of leading source samples covered by at least one frame.
    pub fn covered_len(&self) -> usize {
        (self.n_frames - 1) * self.hop + self.frame_len
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.frame_len..(i + 1) * self.frame_len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.frame_len)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Frames as an `n_frames × frame_len` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_frames, self.frame_len], self.data.clone()).expect("consistent shape")
    }

    /// Frames `[start, end)` as a tensor.
    pub fn slice_tensor(&self, start: usize, end: usize) -> Tensor {
        Tensor::new(
            vec![end - start, self.frame_len],
            self.data[start * self.frame_len..end * self.frame_len].to_vec(),
        )
        .expect("consistent shape")
    }
}

/// Number of full frames that fit into `len` samples.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len {
        0
    } else {
        (len - frame_len) / hop + 1
    }
}

/// Slices `w` into frames; a trailing remainder shorter than a frame is dropped.
pub fn frame(w: &Waveform, frame_len: usize, hop: usize) -> Result<FrameMatrix> {
    if frame_len == 0 || hop == 0 {
        return Err(Error::Argument("frame_len and hop must be positive".into()));
    }
    if w.len() < frame_len {
        return Err(Error::EmptyInput(format!(
            "{} samples cannot hold a {frame_len}-sample frame",
            w.len()
        )));
    }
    let n_frames = frame_count(w.len(), frame_len, hop);
    let mut data = Vec::with_capacity(n_frames * frame_len);
    for i in 0..n_frames {
        data.extend_from_slice(&w.samples[i * hop..i * hop + frame_len]);
    }
    Ok(FrameMatrix {
        data,
        n_frames,
        frame_len,
        hop,
        source_len: w.len(),
        sample_rate: w.sample_rate,
    })
}

/// Number of frames covering each position of the covered span.
pub fn coverage_counts(fm: &FrameMatrix) -> Vec<u32> {
    let mut counts = vec![0u32; fm.covered_len()];
    for i in 0..fm.n_frames {
        for c in &mut counts[i * fm.hop..i * fm.hop + fm.frame_len] {
            *c += 1;
        }
    }
    counts
}

/// Rectangular-window overlap-add: each output sample is the sum of the
/// frame samples covering it divided by how many frames cover it.
pub fn overlap_add(fm: &FrameMatrix) -> Result<Waveform> {
    overlap_add_selected(fm, |_| true)
}

/// Overlap-add of only the frames for which `keep` holds, normalized by the
/// coverage of all frames. Summing the results over a partition of the
/// frames reproduces [`overlap_add`].
pub fn overlap_add_selected<F: Fn(usize) -> bool>(fm: &FrameMatrix, keep: F) -> Result<Waveform> {
    if fm.n_frames == 0 {
        return Err(Error::EmptyInput("no frames to overlap-add".into()));
    }
    let counts = coverage_counts(fm);
    let mut out = vec![0.0; counts.len()];
    for i in (0..fm.n_frames).filter(|&i| keep(i)) {
        for (o, v) in out[i * fm.hop..i * fm.hop + fm.frame_len].iter_mut().zip(fm.row(i)) {
            *o += v;
        }
    }
    for (o, &c) in out.iter_mut().zip(&counts) {
        *o /= c as f64;
    }
    Waveform::new(out, fm.sample_rate)
}

/// Sample-wise sum of equally long sources, without normalization.
pub fn mix(sources: &[Waveform]) -> Result<Waveform> {
    let first = sources
        .first()
        .ok_or_else(|| Error::EmptyInput("nothing to mix".into()))?;
    let mut out = first.samples.clone();
    for (c, s) in sources.iter().enumerate().skip(1) {
        if s.len() != first.len() {
            return Err(Error::Shape(format!(
                "source {c} has {} samples, source 0 has {}",
                s.len(),
                first.len()
            )));
        }
        if s.sample_rate != first.sample_rate {
            return Err(Error::Shape(format!(
                "source {c} sampled at {} Hz, source 0 at {} Hz",
                s.sample_rate, first.sample_rate
            )));
        }
        for (o, v) in out.iter_mut().zip(&s.samples) {
            *o += v;
        }
    }
    Waveform::new(out, first.sample_rate)
}
