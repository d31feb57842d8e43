use std::sync::Arc;

use super::loss::dmon_loss;
use super::network::{assign, forward, init_head};
use super::{AssignmentMatrix, HeadConfig, HeadInput};
use crate::autodiff::{ModularityOperand, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

/// One graph and the head input built over its nodes.
#[derive(Debug, Clone)]
pub struct HeadSample {
    pub input: HeadInput,
    pub operand: Arc<ModularityOperand>,
}

impl HeadSample {
    pub fn new(input: HeadInput, graph: &SimilarityGraph) -> Result<Self> {
        if input.n() != graph.n() {
            return Err(Error::Shape(format!(
                "{} feature rows for a {}-node graph",
                input.n(),
                graph.n()
            )));
        }
        Ok(Self {
            input,
            operand: Arc::new(graph.modularity_operand()),
        })
    }
}

#[derive(Debug, Clone)]
pub struct HeadTraining {
    pub store: ParamStore,
    /// Loss before each optimizer step.
    pub trace: Vec<f64>,
}

impl HeadTraining {
    pub fn steps(&self) -> usize {
        self.trace.len()
    }
}

/// Trains one head on the mean loss over `samples` with full-batch Adam,
/// stopping after `max_steps` or, once past `warmup_steps`, when the loss
/// has not improved by `min_improvement` for `patience` consecutive steps.
pub fn train_head(samples: &[HeadSample], config: &HeadConfig, seed: u64) -> Result<HeadTraining> {
    config.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyInput("no graphs to train the head on".into()))?;
    let (_, dim) = first.input.features().dims2()?;
    let kind = first.input.kind();
    if samples.iter().any(|s| s.input.kind() != kind) {
        return Err(Error::Argument("all head inputs must be of one kind".into()));
    }
    let mut store = init_head(kind, dim, config, seed)?;
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut stall = 0;
    for step in 0..config.max_steps {
        let mut total = 0.0;
        for sample in samples {
            let mut tape = Tape::new();
            let s = forward(&mut tape, &store, &sample.input, true)?;
            let loss = dmon_loss(&mut tape, s, sample.operand.clone())?;
            let loss = tape.scale(loss, 1.0 / samples.len() as f64)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("modularity loss is {value}"),
                });
            }
            total += value;
            let grads = tape.backward(loss)?;
            store.accumulate(&tape, &grads)?;
        }
        trace.push(total);
        store.adam_step(config.lr)?;
        if total < best - config.min_improvement {
            best = total;
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience && step >= config.warmup_steps {
                break;
            }
        }
    }
    if !store.all_finite() {
        return Err(Error::Divergence {
            step: trace.len(),
            detail: "non-finite head parameters".into(),
        });
    }
    Ok(HeadTraining { store, trace })
}

/// Result of optimizing a head on a single mixture's graph.
#[derive(Debug, Clone)]
pub struct MixtureFit {
    pub store: ParamStore,
    pub assignments: AssignmentMatrix,
    pub trace: Vec<f64>,
}

/// Per-mixture mode: train a fresh head on this graph alone and return its
/// assignments for the same nodes.
pub fn fit_mixture(sample: &HeadSample, config: &HeadConfig, seed: u64) -> Result<MixtureFit> {
    let trained = train_head(std::slice::from_ref(sample), config, seed)?;
    let assignments = assign(&trained.store, &sample.input)?;
    Ok(MixtureFit {
        store: trained.store,
        assignments,
        trace: trained.trace,
    })
}
