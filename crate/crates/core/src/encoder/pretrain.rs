use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{contrastive_loss, forward, init_encoder, sample_pairs_with, EncoderConfig, EncoderVars, SpeakerFrames};
use crate::autodiff::{CyclicalLrSchedule, ParamStore, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub schedule: CyclicalLrSchedule,
    pub seed: u64,
    /// Snapshot interval in steps; 0 disables snapshots.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            temperature: 0.5,
            schedule: CyclicalLrSchedule::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return Err(Error::Argument(format!(
                "batch_size {} must be even and at least 4",
                self.batch_size
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Argument("temperature must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub store: ParamStore,
    pub trace: Vec<TraceRow>,
}

/// Trains a freshly initialized encoder for `config.steps` steps.
/// `on_checkpoint` is called with the completed step count every
/// `checkpoint_every` steps.
pub fn pretrain_with<F>(
    corpus: &[SpeakerFrames],
    encoder: &EncoderConfig,
    config: &PretrainConfig,
    on_checkpoint: F,
) -> Result<Pretrained>
where
    F: FnMut(usize, &ParamStore) -> Result<()>,
{
    let mut store = init_encoder(encoder, config.seed)?;
    store.round_to_f32();
    continue_training(store, corpus, encoder, config, config.steps, on_checkpoint)
}

pub fn pretrain(corpus: &[SpeakerFrames], encoder: &EncoderConfig, config: &PretrainConfig) -> Result<Pretrained> {
    pretrain_with(corpus, encoder, config, |_, _| Ok(()))
}

/// Runs optimizer steps from the store's current step count up to
/// `until_step`. Batches and learning rates depend only on the seed and the
/// global step index, so a run resumed from a checkpoint continues exactly
/// as an uninterrupted one would.
pub fn continue_training<F>(
    mut store: ParamStore,
    corpus: &[SpeakerFrames],
    encoder: &EncoderConfig,
    config: &PretrainConfig,
    until_step: usize,
    mut on_checkpoint: F,
) -> Result<Pretrained>
where
    F: FnMut(usize, &ParamStore) -> Result<()>,
{
    config.validate()?;
    encoder.validate()?;
    let start = store.step() as usize;
    let mut trace = Vec::with_capacity(until_step.saturating_sub(start));
    for step in start..until_step {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step as u64 + 1);
        let batch = sample_pairs_with(corpus, config.batch_size, &mut rng)?;

        let mut tape = Tape::new();
        let vars = EncoderVars::bind(&mut tape, &store, encoder, true)?;
        let x = tape.constant(batch.frames);
        let emb = forward(&mut tape, encoder, &vars, x)?;
        let loss = contrastive_loss(&mut tape, emb, &batch.positives, config.temperature)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("contrastive loss is {loss_value}"),
            });
        }
        let grads = tape.backward(loss)?;
        store.accumulate(&tape, &grads)?;
        let lr = config.schedule.lr_at(step);
        store.adam_step(lr)?;
        store.round_to_f32();
        if !store.all_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite encoder parameters".into(),
            });
        }
        trace.push(TraceRow {
            step,
            loss: loss_value,
            lr,
        });
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            on_checkpoint(done, &store)?;
        }
    }
    Ok(Pretrained { store, trace })
}

/// Writes the loss trace as `step,loss,lr` CSV.
pub fn write_trace_csv<W: Write>(mut out: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(out, "step,loss,lr")?;
    for r in rows {
        writeln!(out, "{},{:e},{:e}", r.step, r.loss, r.lr)?;
    }
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parse_err = || Error::Format(format!("{}:{}: malformed trace row", path.display(), i + 1));
        let mut fields = line.split(',');
        let mut next = || fields.next().ok_or_else(parse_err);
        let step = next()?.parse().map_err(|_| parse_err())?;
        let loss = next()?.parse().map_err(|_| parse_err())?;
        let lr = next()?.parse().map_err(|_| parse_err())?;
        rows.push(TraceRow { step, loss, lr });
    }
    Ok(rows)
}
