use serde::{Deserialize, Serialize};

use super::{Partition, SimilarityGraph};
use crate::error::{Error, Result};

fn check_partition(g: &SimilarityGraph, p: &Partition) -> Result<()> {
    if p.n() != g.n() {
        return Err(Error::Shape(format!("partition of {} nodes for a {}-node graph", p.n(), g.n())));
    }
    Ok(())
}

/// Membership mask for a node set; rejects out-of-range and repeated nodes.
fn membership(g: &SimilarityGraph, nodes: &[usize]) -> Result<Vec<bool>> {
    if nodes.is_empty() {
        return Err(Error::Argument("node set is empty".into()));
    }
    let mut inside = vec![false; g.n()];
    for &i in nodes {
        if i >= g.n() {
            return Err(Error::Argument(format!("node {i} outside the {}-node graph", g.n())));
        }
        if std::mem::replace(&mut inside[i], true) {
            return Err(Error::Argument(format!("node {i} listed twice")));
        }
    }
    Ok(inside)
}

/// Internal edge count `m_s` and boundary edge count `c_s` of a node set.
fn internal_and_boundary(g: &SimilarityGraph, inside: &[bool]) -> (usize, usize) {
    let (mut internal, mut boundary) = (0, 0);
    for &(i, j) in g.edges() {
        match (inside[i], inside[j]) {
            (true, true) => internal += 1,
            (true, false) | (false, true) => boundary += 1,
            _ => {}
        }
    }
    (internal, boundary)
}

/// Newman modularity by direct double sum over node pairs:
/// `(1/2m) Σ_ij (A_ij − d_i d_j / 2m) δ(g_i, g_j)`.
pub fn modularity_oracle(g: &SimilarityGraph, p: &Partition) -> Result<f64> {
    check_partition(g, p)?;
    let two_m = 2.0 * g.m() as f64;
    let deg = g.degrees();
    let labels = p.labels();
    let mut total = 0.0;
    for i in 0..g.n() {
        for j in 0..g.n() {
            if labels[i] != labels[j] {
                continue;
            }
            let a = if g.has_edge(i, j) { 1.0 } else { 0.0 };
            total += a - deg[i] as f64 * deg[j] as f64 / two_m;
        }
    }
    Ok(total / two_m)
}

/// `c_s / (2 m_s + c_s)` for a non-empty proper subset of the nodes.
pub fn conductance(g: &SimilarityGraph, nodes: &[usize]) -> Result<f64> {
    let inside = membership(g, nodes)?;
    if nodes.len() == g.n() {
        return Err(Error::Argument("conductance of the full node set is undefined".into()));
    }
    let (internal, boundary) = internal_and_boundary(g, &inside);
    let volume = 2 * internal + boundary;
    if volume == 0 {
        return Err(Error::DegeneratePartition("node set has no incident edges".into()));
    }
    Ok(boundary as f64 / volume as f64)
}

/// `(m_s − d_S² / 4m) / 4`: the community's edge surplus over the
/// configuration-model expectation.
pub fn modularity_metric(g: &SimilarityGraph, nodes: &[usize]) -> Result<f64> {
    let inside = membership(g, nodes)?;
    let (internal, _) = internal_and_boundary(g, &inside);
    let d_s: usize = nodes.iter().map(|&i| g.degree(i)).sum();
    let m = g.m() as f64;
    Ok((internal as f64 - (d_s * d_s) as f64 / (4.0 * m)) / 4.0)
}

/// Graph quality of a partition, scaled ×100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScores {
    /// Size-weighted mean conductance over clusters with incident edges.
    pub conductance: f64,
    /// Newman modularity.
    pub modularity: f64,
    /// Sum of per-community edge surpluses.
    pub community_modularity: f64,
}

pub fn partition_scores(g: &SimilarityGraph, p: &Partition) -> Result<PartitionScores> {
    check_partition(g, p)?;
    let mut weighted = 0.0;
    let mut weight = 0usize;
    let mut community = 0.0;
    for c in 0..p.k() {
        let members = p.members(c);
        if members.is_empty() {
            continue;
        }
        community += modularity_metric(g, &members)?;
        let value = if members.len() == g.n() {
            // A single cluster has no boundary.
            Some(0.0)
        } else {
            match conductance(g, &members) {
                Ok(v) => Some(v),
                Err(Error::DegeneratePartition(_)) => None,
                Err(e) => return Err(e),
            }
        };
        if let Some(v) = value {
            weighted += v * members.len() as f64;
            weight += members.len();
        }
    }
    let conductance = if weight == 0 { 0.0 } else { weighted / weight as f64 };
    Ok(PartitionScores {
        conductance: 100.0 * conductance,
        modularity: 100.0 * modularity_oracle(g, p)?,
        community_modularity: 100.0 * community,
    })
}

/// Graph-quality report as persisted next to a built graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub conductance: f64,
    pub modularity: f64,
    pub theta: Option<f64>,
    pub n: usize,
    pub m: usize,
}

impl GraphReport {
    pub fn new(g: &SimilarityGraph, scores: &PartitionScores) -> Self {
        Self {
            conductance: scores.conductance,
            modularity: scores.modularity,
            theta: g.theta(),
            n: g.n(),
            m: g.m(),
        }
    }
}
