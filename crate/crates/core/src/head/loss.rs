use std::sync::Arc;

use crate::autodiff::{ModularityOperand, Tape, Tensor, Var};
use crate::error::Result;

/// `−Tr(SᵀBS)/2m + (√k/n)·‖Σᵢ Sᵢ‖ − 1` with `k` the number of columns of `S`.
/// The modularity matrix `B` is never formed: the trace uses the sparse
/// adjacency plus a rank-one degree correction.
pub fn dmon_loss(tape: &mut Tape, s: Var, operand: Arc<ModularityOperand>) -> Result<Var> {
    let (n, k) = tape.value(s).dims2()?;
    let two_m = 2.0 * operand.edge_count();
    let trace = tape.trace_quadform(s, operand)?;
    let modularity = tape.scale(trace, -1.0 / two_m)?;
    let sizes = tape.column_sum(s)?;
    let size_norm = tape.norm(sizes)?;
    let collapse = tape.scale(size_norm, (k as f64).sqrt() / n as f64)?;
    let collapse = tape.add_scalar(collapse, -1.0)?;
    tape.add(modularity, collapse)
}

/// The two terms of [`dmon_loss`], evaluated without gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmonTerms {
    pub modularity: f64,
    pub collapse: f64,
}

impl DmonTerms {
    pub fn total(&self) -> f64 {
        self.modularity + self.collapse
    }
}

pub fn dmon_terms(s: &Tensor, operand: &Arc<ModularityOperand>) -> Result<DmonTerms> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let (n, k) = s.dims2()?;
    let trace = tape.trace_quadform(sv, operand.clone())?;
    let modularity = -tape.value(trace).item() / (2.0 * operand.edge_count());
    let sizes = tape.column_sum(sv)?;
    let size_norm = tape.norm(sizes)?;
    let collapse = (k as f64).sqrt() / n as f64 * tape.value(size_norm).item() - 1.0;
    Ok(DmonTerms { modularity, collapse })
}
