//! Finite-difference gradient checks over every differentiable tape
//! operation and both training losses, shared by the test suites and the
//! acceptance run.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, CsrMatrix, Tape, Tensor, Var};
use crate::encoder::contrastive_loss;
use crate::error::Result;
use crate::graph::SimilarityGraph;
use crate::head::dmon_loss;

/// Central-difference step used by the suite.
pub const FD_STEP: f64 = 1e-6;
/// Relative error bound for a gradient to count as correct.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Worst relative error of one case over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub seeds: usize,
    pub worst: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.worst <= GRAD_TOLERANCE
    }
}

type Builder = fn(&mut ChaCha8Rng) -> Result<(Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>)>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Values at least 0.1 away from zero, so no probe crosses a ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

/// Distinct values spaced 0.01 apart in random order, so max-pool windows
/// never hold near-ties.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..len).map(|i| i as f64 * 0.01 - len as f64 * 0.005).collect();
    for i in (1..len).rev() {
        values.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), values).expect("shape matches")
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Result<SimilarityGraph> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    if edges.is_empty() {
        edges.push((0, 1));
    }
    SimilarityGraph::from_edges(n, &edges)
}

fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<CsrMatrix> {
    let mut triplets = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if rng.gen_bool(0.4) {
                triplets.push((r, c, rng.gen_range(-1.0..1.0)));
            }
        }
    }
    CsrMatrix::from_triplets(rows, cols, &triplets)
}

/// Adjacent pairs (0,1), (2,3), … as positives.
fn pair_map(n: usize) -> Vec<usize> {
    (0..n).map(|i| i ^ 1).collect()
}

fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |rng| {
            Ok((vec![uniform(rng, &[3, 4]), uniform(rng, &[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))))
        }),
        ("transpose", |rng| Ok((vec![uniform(rng, &[3, 5])], Box::new(|t, v| t.transpose(v[0]))))),
        ("add", |rng| {
            Ok((vec![uniform(rng, &[2, 3]), uniform(rng, &[2, 3])], Box::new(|t, v| t.add(v[0], v[1]))))
        }),
        ("mul", |rng| {
            Ok((vec![uniform(rng, &[2, 3]), uniform(rng, &[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]))))
        }),
        ("add_row_bias", |rng| {
            Ok((
                vec![uniform(rng, &[4, 3]), uniform(rng, &[3])],
                Box::new(|t, v| t.add_row_bias(v[0], v[1])),
            ))
        }),
        ("scale", |rng| Ok((vec![uniform(rng, &[3, 3])], Box::new(|t, v| t.scale(v[0], -1.7))))),
        ("add_scalar", |rng| Ok((vec![uniform(rng, &[3, 2])], Box::new(|t, v| t.add_scalar(v[0], 0.3))))),
        ("relu", |rng| Ok((vec![away_from_zero(rng, &[4, 5])], Box::new(|t, v| t.relu(v[0]))))),
        ("softmax_rows", |rng| {
            let mut x = uniform(rng, &[4, 5]);
            x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            Ok((vec![x], Box::new(|t, v| t.softmax_rows(v[0]))))
        }),
        ("layer_norm", |rng| {
            Ok((vec![uniform(rng, &[3, 2, 4])], Box::new(|t, v| t.layer_norm(v[0], 1e-5))))
        }),
        ("conv1d", |rng| {
            Ok((
                vec![uniform(rng, &[2, 3, 9]), uniform(rng, &[4, 3, 3]), uniform(rng, &[4])],
                Box::new(|t, v| t.conv1d(v[0], v[1], Some(v[2]), 1, 1)),
            ))
        }),
        ("conv1d_strided", |rng| {
            Ok((
                vec![uniform(rng, &[1, 2, 11]), uniform(rng, &[3, 2, 4])],
                Box::new(|t, v| t.conv1d(v[0], v[1], None, 2, 0)),
            ))
        }),
        ("maxpool1d", |rng| {
            Ok((vec![well_separated(rng, &[2, 3, 8])], Box::new(|t, v| t.maxpool1d(v[0], 2, 2))))
        }),
        ("l2_normalize_rows", |rng| {
            Ok((vec![away_from_zero(rng, &[4, 3])], Box::new(|t, v| t.l2_normalize_rows(v[0]))))
        }),
        ("reduce_sum", |rng| Ok((vec![uniform(rng, &[3, 4])], Box::new(|t, v| t.reduce_sum(v[0]))))),
        ("column_sum", |rng| Ok((vec![uniform(rng, &[5, 3])], Box::new(|t, v| t.column_sum(v[0]))))),
        ("norm", |rng| Ok((vec![away_from_zero(rng, &[6])], Box::new(|t, v| t.norm(v[0]))))),
        ("reshape", |rng| Ok((vec![uniform(rng, &[2, 6])], Box::new(|t, v| t.reshape(v[0], &[3, 4]))))),
        ("spmm", |rng| {
            let m = Arc::new(random_sparse(rng, 5, 4)?);
            Ok((vec![uniform(rng, &[4, 3])], Box::new(move |t, v| t.spmm(m.clone(), v[0]))))
        }),
        ("trace_quadform", |rng| {
            let g = random_graph(rng, 8, 0.4)?;
            let op = Arc::new(g.modularity_operand());
            Ok((vec![uniform(rng, &[8, 3])], Box::new(move |t, v| t.trace_quadform(v[0], op.clone()))))
        }),
        ("cross_entropy_rows", |rng| {
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            Ok((
                vec![uniform(rng, &[4, 5])],
                Box::new(move |t, v| t.cross_entropy_rows(v[0], &targets, false)),
            ))
        }),
        ("cross_entropy_rows_no_diagonal", |rng| {
            Ok((
                vec![uniform(rng, &[4, 4])],
                Box::new(|t, v| t.cross_entropy_rows(v[0], &pair_map(4), true)),
            ))
        }),
        ("contrastive_loss", |rng| {
            Ok((
                vec![away_from_zero(rng, &[6, 4])],
                Box::new(|t, v| {
                    let e = t.l2_normalize_rows(v[0])?;
                    contrastive_loss(t, e, &pair_map(6), 0.5)
                }),
            ))
        }),
        ("contrastive_encoder_stack", |rng| {
            // layer norm → conv → relu → pool → flatten → projection → unit rows → loss
            let x = uniform(rng, &[4, 1, 8]);
            let w = uniform(rng, &[2, 1, 3]);
            let b = uniform(rng, &[2]);
            let p = uniform(rng, &[8, 3]);
            Ok((
                vec![x, w, b, p],
                Box::new(|t, v| {
                    let h = t.layer_norm(v[0], 1e-5)?;
                    let h = t.conv1d(h, v[1], Some(v[2]), 1, 1)?;
                    let h = t.relu(h)?;
                    let h = t.maxpool1d(h, 2, 2)?;
                    let h = t.reshape(h, &[4, 8])?;
                    let e = t.matmul(h, v[3])?;
                    let e = t.l2_normalize_rows(e)?;
                    contrastive_loss(t, e, &pair_map(4), 0.5)
                }),
            ))
        }),
        ("dmon_loss", |rng| {
            let g = random_graph(rng, 10, 0.35)?;
            let op = Arc::new(g.modularity_operand());
            Ok((
                vec![uniform(rng, &[10, 4])],
                Box::new(move |t, v| {
                    let s = t.softmax_rows(v[0])?;
                    dmon_loss(t, s, op.clone())
                }),
            ))
        }),
        ("dmon_loss_head_params", |rng| {
            // Gradient with respect to the MLP head's weights, inputs fixed.
            let g = random_graph(rng, 9, 0.4)?;
            let op = Arc::new(g.modularity_operand());
            let features = uniform(rng, &[9, 3]);
            Ok((
                vec![uniform(rng, &[3, 6]), uniform(rng, &[6]), uniform(rng, &[6, 4]), uniform(rng, &[4])],
                Box::new(move |t, v| {
                    let x = t.constant(features.clone());
                    let h = t.matmul(x, v[0])?;
                    let h = t.add_row_bias(h, v[1])?;
                    let h = t.relu(h)?;
                    let z = t.matmul(h, v[2])?;
                    let z = t.add_row_bias(z, v[3])?;
                    let s = t.softmax_rows(z)?;
                    dmon_loss(t, s, op.clone())
                }),
            ))
        }),
        ("dmon_loss_gcn_head", |rng| {
            let g = random_graph(rng, 8, 0.4)?;
            let op = Arc::new(g.modularity_operand());
            let adjacency = Arc::new(g.normalized_adjacency());
            let features = uniform(rng, &[8, 3]);
            Ok((
                vec![uniform(rng, &[3, 5]), uniform(rng, &[5, 4])],
                Box::new(move |t, v| {
                    let x = t.constant(features.clone());
                    let h = t.spmm(adjacency.clone(), x)?;
                    let h = t.matmul(h, v[0])?;
                    let h = t.relu(h)?;
                    let z = t.matmul(h, v[1])?;
                    let s = t.softmax_rows(z)?;
                    dmon_loss(t, s, op.clone())
                }),
            ))
        }),
    ]
}

/// Runs every case under `seeds` different random draws (seed `s` uses
/// stream `s` of the root seed) and reports the worst relative error.
pub fn gradient_suite(root_seed: u64, seeds: usize) -> Result<Vec<GradCase>> {
    cases()
        .into_iter()
        .map(|(name, build)| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
                rng.set_stream(s as u64);
                let (inputs, op) = build(&mut rng)?;
                let report = grad_check(|t, v| op(t, v), &inputs, FD_STEP, GRAD_TOLERANCE)?;
                worst = worst.max(report.worst());
            }
            Ok(GradCase { name, seeds, worst })
        })
        .collect()
}
