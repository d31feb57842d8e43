//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The operator set covers exactly what the frame encoder, the GCN
//! baseline and the assignment heads need. A [`Tape`] records each
//! operator eagerly; [`Tape::backward`] walks it in reverse with a fixed
//! accumulation order, so repeated runs produce identical bits.

mod gradcheck;
pub mod kernels;
mod params;
mod schedule;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use schedule::CyclicalLrSchedule;
pub use sparse::{CsrMatrix, ModularityOperand};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// Uniform `[-bound, bound]` initialization with `bound = 1/sqrt(fan_in)`.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
