use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max-norm relative error per input, in input order.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|e| *e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks the reverse-mode gradient of `op` against central finite
/// differences with step `h`.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random weighting so
/// every output element contributes. The error for each input is
/// `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
pub fn grad_check<F>(op: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Argument(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let evaluate = |values: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let len = tape.value(out).len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let weights = Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let w = tape.constant(weights);
        let weighted = tape.mul(out, w)?;
        let total = tape.reduce_sum(weighted)?;
        let value = tape.value(total).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(total)?;
        Ok((value, vars.iter().map(|v| grads.get_or_zero(*v)).collect()))
    };

    let (_, analytic) = evaluate(inputs, true)?;
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let (plus, _) = evaluate(&probe, false)?;
            probe[i].data_mut()[j] = orig - h;
            let (minus, _) = evaluate(&probe, false)?;
            probe[i].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let a = analytic[i].data();
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let diff = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
        max_rel_error.push(if scale > 0.0 { diff / scale } else { diff });
    }
    Ok(GradCheckReport {
        max_rel_error,
        tolerance: tol,
    })
}
