use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AssignmentMatrix, HeadConfig};
use crate::autodiff::{uniform_init, CsrMatrix, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

const GCN_WEIGHT: &str = "head.gcn.weight";
const GCN_BIAS: &str = "head.gcn.bias";
const HIDDEN_WEIGHT: &str = "head.hidden.weight";
const HIDDEN_BIAS: &str = "head.hidden.bias";
const OUT_WEIGHT: &str = "head.out.weight";
const OUT_BIAS: &str = "head.out.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Node features straight into the MLP.
    Mlp,
    /// One graph-convolution layer in front of the MLP.
    Gcn,
}

/// What a head consumes for one graph.
#[derive(Debug, Clone)]
pub enum HeadInput {
    Mlp { features: Tensor },
    Gcn { adjacency: Arc<CsrMatrix>, features: Tensor },
}

impl HeadInput {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadInput::Mlp { .. } => HeadKind::Mlp,
            HeadInput::Gcn { .. } => HeadKind::Gcn,
        }
    }

    pub fn features(&self) -> &Tensor {
        match self {
            HeadInput::Mlp { features } | HeadInput::Gcn { features, .. } => features,
        }
    }

    pub fn n(&self) -> usize {
        self.features().shape().first().copied().unwrap_or(0)
    }
}

/// Fresh head parameters for `input_dim`-wide node features.
pub fn init_head(kind: HeadKind, input_dim: usize, config: &HeadConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    if input_dim == 0 {
        return Err(Error::Argument("head input dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let h = config.hidden;
    let mut mlp_in = input_dim;
    if kind == HeadKind::Gcn {
        store.insert(GCN_WEIGHT, uniform_init(&mut rng, &[input_dim, h], input_dim))?;
        store.insert(GCN_BIAS, uniform_init(&mut rng, &[h], input_dim))?;
        mlp_in = h;
    }
    store.insert(HIDDEN_WEIGHT, uniform_init(&mut rng, &[mlp_in, h], mlp_in))?;
    store.insert(HIDDEN_BIAS, uniform_init(&mut rng, &[h], mlp_in))?;
    store.insert(OUT_WEIGHT, uniform_init(&mut rng, &[h, config.k_max], h))?;
    store.insert(OUT_BIAS, uniform_init(&mut rng, &[config.k_max], h))?;
    Ok(store)
}

fn stored_kind(store: &ParamStore) -> HeadKind {
    if store.value(GCN_WEIGHT).is_some() {
        HeadKind::Gcn
    } else {
        HeadKind::Mlp
    }
}

/// Records the head on `tape` and returns the soft assignment `S`.
pub(super) fn forward(tape: &mut Tape, store: &ParamStore, input: &HeadInput, trainable: bool) -> Result<Var> {
    if stored_kind(store) != input.kind() {
        return Err(Error::State(format!(
            "head parameters are for {:?} input, got {:?}",
            stored_kind(store),
            input.kind()
        )));
    }
    let load = |tape: &mut Tape, name: &str| {
        if trainable {
            tape.param(store, name)
        } else {
            tape.frozen_param(store, name)
        }
    };
    let x = tape.constant(input.features().clone());
    let mut h = x;
    if let HeadInput::Gcn { adjacency, .. } = input {
        let w = load(tape, GCN_WEIGHT)?;
        let b = load(tape, GCN_BIAS)?;
        let propagated = tape.spmm(adjacency.clone(), h)?;
        let z = tape.matmul(propagated, w)?;
        let z = tape.add_row_bias(z, b)?;
        h = tape.relu(z)?;
    }
    let w1 = load(tape, HIDDEN_WEIGHT)?;
    let b1 = load(tape, HIDDEN_BIAS)?;
    let w2 = load(tape, OUT_WEIGHT)?;
    let b2 = load(tape, OUT_BIAS)?;
    let z = tape.matmul(h, w1)?;
    let z = tape.add_row_bias(z, b1)?;
    let z = tape.relu(z)?;
    let logits = tape.matmul(z, w2)?;
    let logits = tape.add_row_bias(logits, b2)?;
    tape.softmax_rows(logits)
}

/// Inference pass of a trained head.
pub fn assign(store: &ParamStore, input: &HeadInput) -> Result<AssignmentMatrix> {
    if !input.features().all_finite() {
        return Err(Error::Argument("head input has non-finite features".into()));
    }
    let mut tape = Tape::new();
    let s = forward(&mut tape, store, input, false)?;
    AssignmentMatrix::new(tape.value(s).clone())
}

/// `softmax(relu(F̄W₁ + b₁)W₂ + b₂)` row by row.
pub fn mlp_assign(features: &Tensor, store: &ParamStore) -> Result<AssignmentMatrix> {
    assign(
        store,
        &HeadInput::Mlp {
            features: features.clone(),
        },
    )
}

/// One graph convolution `relu(ÃXW + b)` followed by the MLP head.
pub fn gcn_assign(adjacency: &CsrMatrix, features: &Tensor, store: &ParamStore) -> Result<AssignmentMatrix> {
    assign(
        store,
        &HeadInput::Gcn {
            adjacency: Arc::new(adjacency.clone()),
            features: features.clone(),
        },
    )
}
