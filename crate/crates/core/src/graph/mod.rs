//! Thresholded frame-similarity graph, its derived matrices, and graph
//! quality metrics.

mod metrics;
mod partition;

pub use metrics::{
    conductance, modularity_metric, modularity_oracle, partition_scores, GraphReport, PartitionScores,
};
pub use partition::Partition;

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{CsrMatrix, ModularityOperand};
use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};

const GRAPH_MAGIC: &[u8; 4] = b"CDG1";
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Undirected binary graph over frames. Edges are stored once as `(i, j)`
/// with `i < j`, sorted; neighbor lists are kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    theta: Option<f64>,
}

/// Links every pair of frames whose embedding inner product is at least
/// `theta`.
pub fn build_graph(embeddings: &EmbeddingMatrix, theta: f64) -> Result<SimilarityGraph> {
    let n = embeddings.n();
    if n < 2 {
        return Err(Error::Argument(format!("graph needs at least 2 frames, got {n}")));
    }
    if !theta.is_finite() {
        return Err(Error::Argument("theta must be finite".into()));
    }
    for i in 0..n {
        let norm = embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Argument(format!("embedding row {i} has norm {norm}")));
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        let fi = embeddings.row(i);
        for j in i + 1..n {
            let e = crate::autodiff::kernels::dot(fi, embeddings.row(j));
            if e >= theta {
                edges.push((i, j));
            }
        }
    }
    let mut g = SimilarityGraph::assemble(n, edges)?;
    g.theta = Some(theta);
    Ok(g)
}

impl SimilarityGraph {
    /// Builds a graph from an undirected edge list. Orientation and
    /// duplicates are normalized; self-loops are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut norm = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Argument(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if a == b {
                return Err(Error::Argument(format!("self-loop at node {a}")));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        norm.dedup();
        Self::assemble(n, norm)
    }

    fn assemble(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::DegenerateGraph(format!(
                "no edges among {n} nodes; the modularity matrix is undefined"
            )));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            n,
            edges,
            neighbors,
            theta: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of undirected edges.
    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && self.neighbors[i].binary_search(&j).is_ok()
    }

    /// The 0/1 adjacency matrix.
    pub fn adjacency(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(2 * self.m());
        for &(i, j) in &self.edges {
            triplets.push((i, j, 1.0));
            triplets.push((j, i, 1.0));
        }
        CsrMatrix::from_triplets(self.n, self.n, &triplets).expect("edges are in range")
    }

    /// `D̃^{-1/2}(A + I)D̃^{-1/2}` with `D̃ = D + I`.
    pub fn normalized_adjacency(&self) -> CsrMatrix {
        let scale: Vec<f64> = (0..self.n).map(|i| 1.0 / ((self.degree(i) + 1) as f64).sqrt()).collect();
        let mut triplets = Vec::with_capacity(2 * self.m() + self.n);
        for (i, s) in scale.iter().enumerate() {
            triplets.push((i, i, s * s));
        }
        for &(i, j) in &self.edges {
            let v = scale[i] * scale[j];
            triplets.push((i, j, v));
            triplets.push((j, i, v));
        }
        CsrMatrix::from_triplets(self.n, self.n, &triplets).expect("edges are in range")
    }

    /// Adjacency, degrees and edge count for the sparse modularity trace.
    pub fn modularity_operand(&self) -> ModularityOperand {
        let degrees = self.degrees().into_iter().map(|d| d as f64).collect();
        ModularityOperand::new(self.adjacency(), degrees, self.m() as f64).expect("graph has edges")
    }

    /// Writes the `CDG1` binary form: magic, `n` and `m` as u64 LE, then
    /// the sorted edge pairs as u32 LE.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        if self.n > u32::MAX as usize {
            return Err(Error::Unsupported(format!("{} nodes exceed u32 indices", self.n)));
        }
        out.write_all(GRAPH_MAGIC)?;
        out.write_all(&(self.n as u64).to_le_bytes())?;
        out.write_all(&(self.m() as u64).to_le_bytes())?;
        for &(i, j) in &self.edges {
            out.write_all(&(i as u32).to_le_bytes())?;
            out.write_all(&(j as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::Format("graph file too short".into()))?;
        if &magic != GRAPH_MAGIC {
            return Err(Error::Format("not a CDG1 graph file".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |input: &mut R| -> Result<u64> {
            input
                .read_exact(&mut u64buf)
                .map_err(|_| Error::Format("truncated graph header".into()))?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let n = read_u64(&mut input)? as usize;
        let m = read_u64(&mut input)? as usize;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != m * 8 {
            return Err(Error::Format(format!(
                "graph declares {m} edges but holds {} bytes of edge data",
                bytes.len()
            )));
        }
        let edges: Vec<(usize, usize)> = bytes
            .chunks_exact(8)
            .map(|c| {
                let i = u32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
                let j = u32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
                (i as usize, j as usize)
            })
            .collect();
        if edges.iter().any(|&(i, j)| i >= j || j >= n) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("graph edges are not sorted (i < j) pairs in range".into()));
        }
        Self::assemble(n, edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_rows_form_single_edge() {
        let g = build_graph(&emb(&[&[1.0, 0.0], &[1.0, 0.0]]), 0.9).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.degrees(), vec![1, 1]);
        assert_eq!(g.m(), 1);
    }

    #[test]
    fn orthogonal_rows_are_degenerate() {
        let r = build_graph(&emb(&[&[1.0, 0.0], &[0.0, 1.0]]), 0.5);
        assert!(matches!(r, Err(Error::DegenerateGraph(_))));
    }

    /// Rows of the Cholesky factor of a Gram matrix reproduce its inner products.
    fn rows_with_gram(g: &[[f64; 4]; 4]) -> EmbeddingMatrix {
        let mut l = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                l[i][j] = if i == j { (g[i][i] - s).sqrt() } else { (g[i][j] - s) / l[j][j] };
            }
        }
        EmbeddingMatrix::from_rows(&l).unwrap()
    }

    #[test]
    fn threshold_enumeration_on_constructed_similarities() {
        let gram = [
            [1.0, 0.8, 0.1, 0.1],
            [0.8, 1.0, 0.1, 0.1],
            [0.1, 0.1, 1.0, 0.7],
            [0.1, 0.1, 0.7, 1.0],
        ];
        let e = rows_with_gram(&gram);
        let mut expected = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                let sim = crate::autodiff::kernels::dot(e.row(i), e.row(j));
                assert!((sim - gram[i][j]).abs() < 1e-12);
                if gram[i][j] >= 0.5 {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(expected, vec![(0, 1), (2, 3)]);
        let g = build_graph(&e, 0.5).unwrap();
        assert_eq!(g.edges(), expected.as_slice());
        assert_eq!(g.m(), 2);
    }

    #[test]
    fn equality_keeps_the_edge() {
        let g = build_graph(&emb(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]), 0.0).unwrap();
        assert_eq!(g.m(), 3);
    }

    #[test]
    fn normalized_adjacency_fixtures() {
        let g = SimilarityGraph::from_edges(2, &[(0, 1)]).unwrap();
        let a = g.normalized_adjacency();
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!((a.get(r, c) - 0.5).abs() < 1e-15);
        }
        let star = SimilarityGraph::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let a = star.normalized_adjacency();
        assert!((a.get(0, 1) - 1.0 / 8f64.sqrt()).abs() < 1e-15);
        assert!((a.get(0, 1) - 0.3536).abs() < 1e-4);
        // A 4-cycle is 2-regular: every row of the normalized matrix sums to 1.
        let ring = SimilarityGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        for s in ring.normalized_adjacency().row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn persistence_round_trip() {
        let g = SimilarityGraph::from_edges(5, &[(3, 1), (0, 4), (1, 2)]).unwrap();
        let mut bytes = Vec::new();
        g.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CDG1");
        assert_eq!(bytes.len(), 4 + 16 + 3 * 8);
        let back = SimilarityGraph::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, g);
        assert!(matches!(
            SimilarityGraph::read_from(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SimilarityGraph::read_from(bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn from_edges_normalizes_and_validates() {
        let g = SimilarityGraph::from_edges(3, &[(2, 0), (0, 2), (1, 0)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2)]);
        assert!(g.has_edge(2, 0));
        assert!(SimilarityGraph::from_edges(3, &[(1, 1)]).is_err());
        assert!(SimilarityGraph::from_edges(3, &[(0, 3)]).is_err());
        assert!(matches!(SimilarityGraph::from_edges(3, &[]), Err(Error::DegenerateGraph(_))));
    }

    fn random_embeddings(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        EmbeddingMatrix::from_rows(&rows).unwrap()
    }

    proptest! {
        #[test]
        fn structure_invariants(seed in any::<u64>(), theta in -0.5f64..0.6) {
            let e = random_embeddings(20, 3, seed);
            if let Ok(g) = build_graph(&e, theta) {
                let deg = g.degrees();
                prop_assert_eq!(deg.iter().sum::<usize>(), 2 * g.m());
                let a = g.adjacency();
                for i in 0..g.n() {
                    prop_assert_eq!(a.get(i, i), 0.0);
                    for j in 0..g.n() {
                        prop_assert_eq!(a.get(i, j), a.get(j, i));
                    }
                }
                // Rows of the implicit modularity matrix sum to zero.
                let two_m = 2.0 * g.m() as f64;
                for i in 0..g.n() {
                    let row: f64 = (0..g.n())
                        .map(|j| a.get(i, j) - deg[i] as f64 * deg[j] as f64 / two_m)
                        .sum();
                    prop_assert!(row.abs() < 1e-9);
                }
            }
        }

        #[test]
        fn raising_theta_never_adds_edges(seed in any::<u64>(), lo in -0.5f64..0.5, delta in 0.0f64..0.5) {
            let e = random_embeddings(16, 3, seed);
            let count = |t: f64| build_graph(&e, t).map(|g| g.m()).unwrap_or(0);
            prop_assert!(count(lo + delta) <= count(lo));
        }
    }
}
