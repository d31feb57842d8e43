use std::sync::Arc;

use condeepmod::autodiff::{Tape, Tensor};
use condeepmod::graph::{modularity_oracle, partition_scores, Partition, SimilarityGraph};
use condeepmod::head::dmon_terms;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(rng: &mut ChaCha8Rng) -> SimilarityGraph {
    let n = rng.gen_range(2..=50);
    let p = rng.gen_range(0.05..0.6);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    if edges.is_empty() {
        edges.push((0, n - 1));
    }
    SimilarityGraph::from_edges(n, &edges).unwrap()
}

fn dense_adjacency(g: &SimilarityGraph) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; g.n()]; g.n()];
    for &(i, j) in g.edges() {
        a[i][j] = 1.0;
        a[j][i] = 1.0;
    }
    a
}

/// B = A − ddᵀ/2m, materialized.
fn dense_b(g: &SimilarityGraph) -> Vec<Vec<f64>> {
    let a = dense_adjacency(g);
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let two_m: f64 = d.iter().sum();
    (0..g.n())
        .map(|i| (0..g.n()).map(|j| a[i][j] - d[i] * d[j] / two_m).collect())
        .collect()
}

/// Tr(SᵀBS) with dense B.
fn dense_trace(b: &[Vec<f64>], s: &Tensor) -> f64 {
    let k = s.shape()[1];
    let mut total = 0.0;
    for c in 0..k {
        for (i, bi) in b.iter().enumerate() {
            for (j, bij) in bi.iter().enumerate() {
                total += s.row(i)[c] * bij * s.row(j)[c];
            }
        }
    }
    total
}

/// Newman Q by the pairwise double sum, written independently of the library.
fn double_sum_q(g: &SimilarityGraph, labels: &[usize]) -> f64 {
    let b = dense_b(g);
    let two_m = 2.0 * g.m() as f64;
    let mut q = 0.0;
    for i in 0..g.n() {
        for j in 0..g.n() {
            if labels[i] == labels[j] {
                q += b[i][j];
            }
        }
    }
    q / two_m
}

#[test]
fn trace_form_matches_double_sum_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let g = random_graph(&mut rng);
        let k = rng.gen_range(1..=g.n().min(6));
        let labels: Vec<usize> = (0..g.n()).map(|_| rng.gen_range(0..k)).collect();
        let p = Partition::new(labels.clone(), k).unwrap();
        let reference = double_sum_q(&g, &labels);

        let one_hot = p.one_hot(k).unwrap();
        let op = Arc::new(g.modularity_operand());
        let trace_q = -dmon_terms(&one_hot, &op).unwrap().modularity;
        assert!((trace_q - reference).abs() <= 1e-9, "trace {trace_q} vs double sum {reference}");

        let oracle = modularity_oracle(&g, &p).unwrap();
        assert!((oracle - reference).abs() <= 1e-9);

        let scores = partition_scores(&g, &p).unwrap();
        assert!((scores.modularity / 100.0 - reference).abs() <= 1e-9);
        // Σ_s (m_s − d_S²/4m) = m·Q, so the summed surpluses are m·Q/4.
        let m = g.m() as f64;
        assert!((scores.community_modularity / 100.0 - m * reference / 4.0).abs() <= 1e-9 * m.max(1.0));
    }
}

#[test]
fn sparse_decomposition_matches_dense_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let g = random_graph(&mut rng);
        let k = rng.gen_range(1..=8);
        let s = Tensor::new(vec![g.n(), k], (0..g.n() * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let reference = dense_trace(&dense_b(&g), &s);
        let mut tape = Tape::new();
        let v = tape.constant(s);
        let t = tape.trace_quadform(v, Arc::new(g.modularity_operand())).unwrap();
        let sparse = tape.value(t).item();
        assert!(
            (sparse - reference).abs() <= 1e-9 * reference.abs().max(1.0),
            "sparse {sparse} vs dense {reference}"
        );
    }
}

#[test]
fn modularity_matrix_rows_sum_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let g = random_graph(&mut rng);
        for row in dense_b(&g) {
            assert!(row.iter().sum::<f64>().abs() <= 1e-12);
        }
        let uniform = Tensor::filled(&[g.n(), 4], 0.25);
        let terms = dmon_terms(&uniform, &Arc::new(g.modularity_operand())).unwrap();
        assert!(terms.modularity.abs() <= 1e-12);
        assert!(terms.collapse.abs() <= 1e-12);
    }
}
