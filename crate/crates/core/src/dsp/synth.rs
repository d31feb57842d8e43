//! Deterministic synthetic speakers and mixtures.
//!
//! A speaker is a harmonic stack at a fixed fundamental with its own
//! spectral tilt (timbre) and syllable-rate amplitude modulation. Mixtures
//! place speakers on alternating turns whose boundaries overlap so that a
//! requested fraction of frames carries two or more active sources.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_count, mix, Waveform, DEFAULT_FRAME_LEN, DEFAULT_HOP, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MIN_F0: f64 = 80.0;
pub const MAX_F0: f64 = 400.0;
pub const MIN_F0_SPACING: f64 = 10.0;
pub const DEFAULT_OVERLAP_FRACTION: f64 = 0.25;
pub const DEFAULT_GAIN_DB_RANGE: (f64, f64) = (0.0, 5.0);

const PEAK: f64 = 0.9;
const AM_FLOOR: f64 = 0.05;
const AM_SHAPE: f64 = 1.5;
const REFERENCE_RMS: f64 = 0.05;
const MIX_HEADROOM: f64 = 0.98;
const MEAN_TURN_S: f64 = 0.5;
const FADE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: u32,
    /// Fundamental frequency in Hz.
    pub f0: f64,
    /// `(multiple of f0, relative amplitude)` pairs.
    pub harmonics: Vec<(f64, f64)>,
    /// Amplitude-modulation rate in Hz; zero disables modulation.
    pub am_rate: f64,
    pub seed: u64,
}

impl SpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_F0..=MAX_F0).contains(&self.f0) {
            return Err(Error::Argument(format!(
                "speaker {} f0 {} Hz outside [{MIN_F0}, {MAX_F0}]",
                self.speaker_id, self.f0
            )));
        }
        if self.harmonics.is_empty() {
            return Err(Error::Argument(format!("speaker {} has no harmonics", self.speaker_id)));
        }
        if self.am_rate < 0.0 || !self.am_rate.is_finite() {
            return Err(Error::Argument("am_rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// `count` speakers with fundamentals spread over the allowed range on a
/// 10 Hz grid, so any two differ by at least 10 Hz.
pub fn speaker_bank(count: usize, seed: u64) -> Result<Vec<SpeakerSpec>> {
    let slots = ((MAX_F0 - MIN_F0) / MIN_F0_SPACING) as usize + 1;
    if count == 0 || count > slots {
        return Err(Error::Argument(format!("speaker count must be in 1..={slots}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f0s: Vec<f64> = (0..count)
        .map(|i| {
            let slot = if count == 1 {
                slots / 2
            } else {
                (i as f64 * (slots - 1) as f64 / (count - 1) as f64).round() as usize
            };
            MIN_F0 + slot as f64 * MIN_F0_SPACING
        })
        .collect();
    f0s.shuffle(&mut rng);
    Ok(f0s
        .into_iter()
        .enumerate()
        .map(|(id, f0)| {
            let tilt = rng.gen_range(0.4..1.2);
            let n_harm = ((DEFAULT_SAMPLE_RATE as f64 * 0.45) / f0).floor().min(24.0) as usize;
            let harmonics = (1..=n_harm.max(1))
                .map(|h| (h as f64, rng.gen_range(0.3..1.0) / (h as f64).powf(tilt)))
                .collect();
            SpeakerSpec {
                speaker_id: id as u32,
                f0,
                harmonics,
                am_rate: rng.gen_range(2.5..6.0),
                seed: rng.gen(),
            }
        })
        .collect())
}

/// Harmonic tone stack of `spec`, amplitude modulated at `spec.am_rate`,
/// with seeded random phases and a slow random gain envelope, scaled to a
/// peak of 0.9.
pub fn synth_utterance(spec: &SpeakerSpec, duration_s: f64, seed: u64) -> Result<Waveform> {
    spec.validate()?;
    if !(duration_s > 0.0) {
        return Err(Error::Argument("duration must be positive".into()));
    }
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let len = (duration_s * sr).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(seed);

    let nyquist = sr / 2.0;
    let partials: Vec<(f64, f64, f64)> = spec
        .harmonics
        .iter()
        .map(|&(mult, amp)| (TAU * mult * spec.f0 / sr, amp, rng.gen_range(0.0..TAU)))
        .filter(|&(w, _, _)| w / TAU * sr < nyquist)
        .collect();
    let am_phase = rng.gen_range(0.0..TAU);
    let gain_rate = rng.gen_range(0.2..0.7);
    let gain_phase = rng.gen_range(0.0..TAU);
    let gain_depth = rng.gen_range(0.1..0.3);

    let mut samples: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let tone: f64 = partials
                .iter()
                .map(|&(w, amp, phase)| amp * (w * n as f64 + phase).sin())
                .sum();
            let am = if spec.am_rate > 0.0 {
                let raised = 0.5 * (1.0 - (TAU * spec.am_rate * t + am_phase).cos());
                AM_FLOOR + (1.0 - AM_FLOOR) * raised.powf(AM_SHAPE)
            } else {
                1.0
            };
            let gain = 1.0 + gain_depth * (TAU * gain_rate * t + gain_phase).sin();
            tone * am * gain
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut samples {
            *v *= PEAK / peak;
        }
    }
    Waveform::new(samples, DEFAULT_SAMPLE_RATE)
}

/// Half-open sample interval `[start, end)` during which a source is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityInterval {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    pub activity: Vec<Vec<ActivityInterval>>,
    pub speaker_ids: Vec<u32>,
    pub gains_db: Vec<f64>,
}

impl MixtureRecord {
    /// Per-frame flags: which sources are active anywhere inside each frame.
    pub fn frame_activity(&self, frame_len: usize, hop: usize) -> Vec<Vec<bool>> {
        let n = frame_count(self.mixture.len(), frame_len, hop);
        (0..n)
            .map(|i| {
                let (s, e) = (i * hop, i * hop + frame_len);
                self.activity
                    .iter()
                    .map(|ivs| ivs.iter().any(|iv| iv.start < e && iv.end > s))
                    .collect()
            })
            .collect()
    }

    /// Fraction of frames in which two or more sources are active.
    pub fn overlap_fraction(&self, frame_len: usize, hop: usize) -> f64 {
        let act = self.frame_activity(frame_len, hop);
        if act.is_empty() {
            return 0.0;
        }
        act.iter().filter(|f| f.iter().filter(|&&a| a).count() >= 2).count() as f64 / act.len() as f64
    }
}

/// Builds a mixture of one utterance per speaker on alternating turns.
///
/// Turn boundaries are either separated by a gap of `frame_len − hop`
/// samples (no frame sees both speakers) or overlapped, with the overlap
/// sized so that the fraction of frames containing two or more active
/// sources approximates `overlap_fraction` for the default framing.
pub fn synth_mixture(
    specs: &[SpeakerSpec],
    duration_s: f64,
    overlap_fraction: f64,
    gain_db_range: (f64, f64),
    seed: u64,
) -> Result<MixtureRecord> {
    if !(2..=5).contains(&specs.len()) {
        return Err(Error::Argument(format!("{} speakers, need 2 to 5", specs.len())));
    }
    if !(0.0..=1.0).contains(&overlap_fraction) {
        return Err(Error::Argument(format!("overlap fraction {overlap_fraction} outside [0, 1]")));
    }
    let (g_lo, g_hi) = gain_db_range;
    if !(g_lo <= g_hi) {
        return Err(Error::Argument("gain range must satisfy lo <= hi".into()));
    }
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let (frame_len, hop) = (DEFAULT_FRAME_LEN, DEFAULT_HOP);
    let len = (duration_s * sr).round() as usize;
    let n_turns = ((duration_s / MEAN_TURN_S).round() as usize).max(specs.len());
    let min_turn = 2 * frame_len + FADE;
    if len < n_turns * min_turn {
        return Err(Error::Argument(format!(
            "{duration_s} s is too short for {} speaker turns",
            n_turns
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Turn order: every speaker at least once, never the same speaker twice in a row.
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.shuffle(&mut rng);
    while order.len() < n_turns {
        let last = *order.last().expect("non-empty");
        let mut next = rng.gen_range(0..specs.len() - 1);
        if next >= last {
            next += 1;
        }
        order.push(next);
    }

    // Turn boundaries on the hop grid.
    let weights: Vec<f64> = (0..n_turns).map(|_| rng.gen_range(0.6..1.4)).collect();
    let total_w: f64 = weights.iter().sum();
    let grid = (len / hop) as f64;
    let mut bounds = vec![0usize];
    let mut acc = 0.0;
    for w in &weights[..n_turns - 1] {
        acc += w;
        bounds.push(((acc / total_w * grid).round() as usize) * hop);
    }
    bounds.push(len);

    // Overlapped frames per boundary. A boundary that abuts two turns already
    // puts `frame_len/hop − 1` straddling frames in overlap; extending the
    // earlier turn by e samples adds e/hop more.
    let n_bounds = n_turns - 1;
    let straddle = frame_len / hop - 1;
    let target = overlap_fraction * frame_count(len, frame_len, hop) as f64;
    let mut overlap_frames = vec![0usize; n_bounds];
    if target >= (straddle * n_bounds) as f64 {
        let extra = target - (straddle * n_bounds) as f64;
        let jitter: Vec<f64> = (0..n_bounds).map(|_| rng.gen_range(0.5..1.5)).collect();
        let jsum: f64 = jitter.iter().sum();
        for (o, j) in overlap_frames.iter_mut().zip(&jitter) {
            *o = straddle + (extra * j / jsum).round() as usize;
        }
    } else {
        let used = ((target / straddle as f64).round() as usize).min(n_bounds);
        let mut idx: Vec<usize> = (0..n_bounds).collect();
        idx.shuffle(&mut rng);
        for &b in &idx[..used] {
            overlap_frames[b] = straddle;
        }
    }

    let mut activity: Vec<Vec<ActivityInterval>> = vec![Vec::new(); specs.len()];
    for t in 0..n_turns {
        let start = bounds[t];
        let mut end = bounds[t + 1];
        if t + 1 < n_turns {
            let next_len = bounds[t + 2] - bounds[t + 1];
            if overlap_frames[t] == 0 {
                end -= frame_len - hop;
            } else {
                let ext = (overlap_frames[t] - straddle) * hop;
                end += ext.min(next_len.saturating_sub(frame_len + FADE));
            }
        }
        activity[order[t]].push(ActivityInterval { start, end });
    }

    let mut sources = Vec::with_capacity(specs.len());
    let mut gains_db = Vec::with_capacity(specs.len());
    for (c, spec) in specs.iter().enumerate() {
        let utter = synth_utterance(spec, duration_s, rng.gen())?;
        let mut gate = vec![0.0; len];
        for iv in &activity[c] {
            for (n, g) in gate[iv.start..iv.end].iter_mut().enumerate() {
                let from_edge = n.min(iv.end - iv.start - 1 - n);
                *g = if from_edge < FADE {
                    0.5 * (1.0 - (std::f64::consts::PI * (from_edge as f64 + 0.5) / FADE as f64).cos())
                } else {
                    1.0
                };
            }
        }
        let mut samples: Vec<f64> = utter.samples()[..len].iter().zip(&gate).map(|(s, g)| s * g).collect();
        let gain_db = if g_hi > g_lo { rng.gen_range(g_lo..=g_hi) } else { g_lo };
        let rms = (samples.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
        let scale = REFERENCE_RMS * 10f64.powf(gain_db / 20.0) / rms.max(1e-12);
        for v in &mut samples {
            *v *= scale;
        }
        gains_db.push(gain_db);
        sources.push(Waveform::new(samples, DEFAULT_SAMPLE_RATE)?);
    }

    let mut mixture = mix(&sources)?;
    let peak = mixture.peak();
    if peak > MIX_HEADROOM {
        let factor = MIX_HEADROOM / peak;
        sources = sources.iter().map(|s| s.scaled(factor)).collect();
        mixture = mix(&sources)?;
    }
    Ok(MixtureRecord {
        mixture,
        sources,
        activity,
        speaker_ids: specs.iter().map(|s| s.speaker_id).collect(),
        gains_db,
    })
}
