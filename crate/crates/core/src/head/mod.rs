//! Soft cluster-assignment heads over frame graphs, the collapse-regularized
//! modularity loss they are trained with, and hardening of soft assignments
//! into a frame partition.

mod harden;
mod loss;
mod network;
mod train;

pub use harden::{harden, merge_columns, Hardened};
pub use loss::{dmon_loss, dmon_terms, DmonTerms};
pub use network::{assign, gcn_assign, init_head, mlp_assign, HeadInput, HeadKind};
pub use train::{fit_mixture, train_head, HeadSample, HeadTraining, MixtureFit};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Optimize a fresh head on each mixture's own graph.
    PerMixture,
    /// Train one head across a corpus of graphs, then run it forward only.
    Amortized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub k_max: usize,
    pub max_steps: usize,
    /// Stop after this many consecutive steps without sufficient improvement.
    pub patience: usize,
    pub min_improvement: f64,
    /// Plateau stopping is not armed before this many steps: training
    /// starts near the uniform assignment, a saddle where the loss barely
    /// moves until the optimizer leaves it.
    pub warmup_steps: usize,
    pub lr: f64,
    pub min_frac: f64,
    /// Soft columns at least this cosine-similar are merged before
    /// hardening; values above 1 disable merging.
    pub merge_similarity: f64,
    pub mode: HeadMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            k_max: 16,
            max_steps: 2000,
            patience: 50,
            min_improvement: 1e-5,
            warmup_steps: 300,
            lr: 5e-3,
            min_frac: 0.02,
            merge_similarity: 0.9,
            mode: HeadMode::PerMixture,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max < 1 {
            return Err(Error::Argument("k_max must be at least 1".into()));
        }
        if self.hidden < self.k_max {
            return Err(Error::Argument(format!(
                "hidden width {} is smaller than k_max {}",
                self.hidden, self.k_max
            )));
        }
        if !(self.lr > 0.0) || !(self.min_improvement >= 0.0) {
            return Err(Error::Argument("lr must be positive and min_improvement non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.min_frac) {
            return Err(Error::Argument("min_frac must lie in [0, 1)".into()));
        }
        if !(self.merge_similarity > 0.0) {
            return Err(Error::Argument("merge_similarity must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Argument("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Row-stochastic `n × k` soft assignment of nodes to clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix(Tensor);

impl AssignmentMatrix {
    pub fn new(s: Tensor) -> Result<Self> {
        let (_, k) = s.dims2()?;
        if k == 0 {
            return Err(Error::Shape("assignment matrix needs at least one column".into()));
        }
        for (i, row) in s.rows().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Argument(format!("row {i} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Argument(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self(s))
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}
