//! Binary frame masks from a partition and waveform reconstruction.

use crate::dsp::{overlap_add_selected, FrameMatrix, Waveform};
use crate::error::{Error, Result};
use crate::graph::Partition;

/// One 0/1 mask per cluster; at every frame exactly one mask is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    masks: Vec<Vec<bool>>,
}

impl MaskSet {
    /// Validates that the masks partition the frames.
    pub fn new(masks: Vec<Vec<bool>>) -> Result<Self> {
        let n = masks
            .first()
            .ok_or_else(|| Error::EmptyInput("no masks".into()))?
            .len();
        if masks.iter().any(|m| m.len() != n) {
            return Err(Error::Shape("masks differ in length".into()));
        }
        for t in 0..n {
            let active = masks.iter().filter(|m| m[t]).count();
            if active != 1 {
                return Err(Error::Argument(format!("frame {t} is covered by {active} masks")));
            }
        }
        Ok(Self { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.masks[0].len()
    }

    pub fn mask(&self, c: usize) -> &[bool] {
        &self.masks[c]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }
}

/// Mask `c` is set exactly at the frames labeled `c`.
pub fn masks_from_partition(p: &Partition) -> Result<MaskSet> {
    if p.k() == 0 || p.n() == 0 {
        return Err(Error::EmptyInput("partition has no clusters or no frames".into()));
    }
    let masks = (0..p.k())
        .map(|c| p.labels().iter().map(|&l| l == c).collect())
        .collect();
    MaskSet::new(masks)
}

/// Overlap-adds the frames selected by each mask, normalized by the
/// coverage of all frames so the estimates sum to the mixture on the
/// covered span. Samples past the last full frame go to estimate 0.
pub fn apply_masks(mixture: &Waveform, fm: &FrameMatrix, masks: &MaskSet) -> Result<Vec<Waveform>> {
    if masks.n_frames() != fm.n_frames() {
        return Err(Error::Shape(format!(
            "{} mask frames for {} mixture frames",
            masks.n_frames(),
            fm.n_frames()
        )));
    }
    if fm.source_len() != mixture.len() {
        return Err(Error::Shape(format!(
            "frames cover a {}-sample signal, mixture has {}",
            fm.source_len(),
            mixture.len()
        )));
    }
    let covered = fm.covered_len();
    masks
        .masks()
        .iter()
        .enumerate()
        .map(|(c, mask)| {
            let mut samples = overlap_add_selected(fm, |i| mask[i])?.into_samples();
            if c == 0 {
                samples.extend_from_slice(&mixture.samples()[covered..]);
            } else {
                samples.resize(mixture.len(), 0.0);
            }
            Waveform::new(samples, mixture.sample_rate())
        })
        .collect()
}
