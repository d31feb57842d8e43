use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::dsp::FrameMatrix;
use crate::error::{Error, Result};

/// All frames of one speaker's speech.
#[derive(Debug, Clone)]
pub struct SpeakerFrames {
    pub speaker_id: u32,
    pub frames: FrameMatrix,
}

/// A contrastive batch: rows `2i` and `2i+1` are a same-speaker pair and
/// every other row is a negative for both.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub frames: Tensor,
    /// `positives[i]` is the row paired with row `i`.
    pub positives: Vec<usize>,
    pub speakers: Vec<u32>,
    /// `(group index, frame index)` each row was drawn from.
    pub origin: Vec<(usize, usize)>,
}

/// Draws `batch_n / 2` disjoint same-speaker pairs with a seeded generator.
pub fn sample_pairs(groups: &[SpeakerFrames], batch_n: usize, seed: u64) -> Result<PairBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_pairs_with(groups, batch_n, &mut rng)
}

/// Each pair picks a speaker uniformly among those that still have two
/// unused frames, then two distinct unused frames of that speaker.
pub fn sample_pairs_with<R: Rng>(groups: &[SpeakerFrames], batch_n: usize, rng: &mut R) -> Result<PairBatch> {
    if batch_n < 2 || batch_n % 2 != 0 {
        return Err(Error::Argument(format!("batch size {batch_n} must be even and >= 2")));
    }
    if groups.len() < 2 {
        return Err(Error::Data(format!("{} speakers, need at least 2", groups.len())));
    }
    let width = groups[0].frames.frame_len();
    if groups.iter().any(|g| g.frames.frame_len() != width) {
        return Err(Error::Shape("speakers framed with different frame lengths".into()));
    }
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    let remaining = |used: &[Vec<usize>], g: usize| groups[g].frames.n_frames() - used[g].len();

    let mut data = Vec::with_capacity(batch_n * width);
    let mut origin = Vec::with_capacity(batch_n);
    let mut speakers = Vec::with_capacity(batch_n);
    for _ in 0..batch_n / 2 {
        let eligible: Vec<usize> = (0..groups.len()).filter(|&g| remaining(&used, g) >= 2).collect();
        if eligible.is_empty() {
            return Err(Error::Data("no speaker has two unused frames left".into()));
        }
        let g = eligible[rng.gen_range(0..eligible.len())];
        for _ in 0..2 {
            // Uniform over unused frames: draw a rank among the free slots.
            let mut r = rng.gen_range(0..remaining(&used, g));
            let mut sorted = used[g].clone();
            sorted.sort_unstable();
            for &u in &sorted {
                if u <= r {
                    r += 1;
                }
            }
            used[g].push(r);
            data.extend_from_slice(groups[g].frames.row(r));
            origin.push((g, r));
            speakers.push(groups[g].speaker_id);
        }
    }
    let positives = (0..batch_n).map(|i| i ^ 1).collect();
    Ok(PairBatch {
        frames: Tensor::new(vec![batch_n, width], data)?,
        positives,
        speakers,
        origin,
    })
}
