//! Unsupervised monaural speech separation.
//!
//! Frames of a mixture are embedded by a contrastively trained encoder,
//! linked into a thresholded similarity graph, clustered by an assignment
//! head trained on a collapse-regularized modularity objective, and turned
//! into binary frame masks that reconstruct one waveform per cluster.

pub mod autodiff;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod head;
pub mod pipeline;
pub mod separation;
pub mod verify;

pub use error::{Error, Result};
