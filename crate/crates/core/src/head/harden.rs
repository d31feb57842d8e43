use super::AssignmentMatrix;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::Partition;

/// A hardened partition; `surviving[c]` is the soft-assignment column that
/// became cluster `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hardened {
    pub partition: Partition,
    pub surviving: Vec<usize>,
}

impl Hardened {
    pub fn k_eff(&self) -> usize {
        self.surviving.len()
    }
}

/// Index of the largest value among `candidates`; ties go to the earliest.
fn best_of(row: &[f64], candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for c in candidates {
        if best.map_or(true, |b| row[c] > row[b]) {
            best = Some(c);
        }
    }
    best
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut root = x;
    while parent[root] != root {
        root = parent[root];
    }
    let mut x = x;
    while parent[x] != root {
        let next = parent[x];
        parent[x] = root;
        x = next;
    }
    root
}

/// Folds together soft-assignment columns whose cosine similarity is at
/// least `similarity` (transitively), summing each group into its lowest
/// column and zeroing the rest. The modularity objective is indifferent to
/// splitting one community evenly over several columns, so without this
/// step near-tied rows would fragment a community at argmax time.
/// `similarity > 1` disables merging.
pub fn merge_columns(s: &AssignmentMatrix, similarity: f64) -> Result<AssignmentMatrix> {
    if similarity.is_nan() {
        return Err(Error::Argument("merge similarity is NaN".into()));
    }
    let (n, k) = (s.n(), s.k());
    let columns: Vec<Vec<f64>> = (0..k).map(|c| (0..n).map(|i| s.row(i)[c]).collect()).collect();
    let norms: Vec<f64> = columns.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut parent: Vec<usize> = (0..k).collect();
    for a in 0..k {
        for b in a + 1..k {
            if norms[a] == 0.0 || norms[b] == 0.0 {
                continue;
            }
            let dot: f64 = columns[a].iter().zip(&columns[b]).map(|(x, y)| x * y).sum();
            if dot / (norms[a] * norms[b]) >= similarity {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let roots: Vec<usize> = (0..k).map(|c| find(&mut parent, c)).collect();
    let mut data = vec![0.0; n * k];
    for i in 0..n {
        for (c, &v) in s.row(i).iter().enumerate() {
            data[i * k + roots[c]] += v;
        }
    }
    // Summation can overshoot 1 by an ulp.
    data.iter_mut().for_each(|v| *v = v.min(1.0));
    AssignmentMatrix::new(Tensor::new(vec![n, k], data)?)
}

/// Row-wise argmax (lowest index on ties), then dissolves clusters holding
/// fewer than `max(2, min_frac·n)` nodes and moves their nodes to their
/// best-scoring surviving cluster. Survivors are relabeled `0..k_eff` in
/// column order.
pub fn harden(s: &AssignmentMatrix, min_frac: f64) -> Result<Hardened> {
    let (n, k) = (s.n(), s.k());
    let labels: Vec<usize> = (0..n).map(|i| best_of(s.row(i), 0..k).expect("k >= 1")).collect();
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    let threshold = (min_frac * n as f64).max(2.0);
    let surviving: Vec<usize> = (0..k).filter(|&c| sizes[c] as f64 >= threshold).collect();
    if surviving.is_empty() {
        return Err(Error::DegeneratePartition(format!(
            "no cluster holds at least {threshold} of {n} nodes"
        )));
    }
    let mut relabel = vec![usize::MAX; k];
    for (new, &old) in surviving.iter().enumerate() {
        relabel[old] = new;
    }
    let final_labels = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let target = if relabel[l] != usize::MAX {
                l
            } else {
                best_of(s.row(i), surviving.iter().copied()).expect("survivors exist")
            };
            relabel[target]
        })
        .collect();
    Ok(Hardened {
        partition: Partition::new(final_labels, surviving.len())?,
        surviving,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn matrix(rows: &[Vec<f64>]) -> AssignmentMatrix {
        AssignmentMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn one_hot_rows_keep_labels() {
        let rows: Vec<Vec<f64>> = [0, 0, 1, 1, 2, 2]
            .iter()
            .map(|&c| (0..3).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect();
        let h = harden(&matrix(&rows), 0.02).unwrap();
        assert_eq!(h.partition.labels(), &[0, 0, 1, 1, 2, 2]);
        assert_eq!(h.k_eff(), 3);
    }

    #[test]
    fn small_clusters_are_dissolved() {
        // 100 rows dominated by columns 3 and 9; one stray row each on 15 other columns.
        let mut rows = Vec::new();
        for i in 0..100 {
            let mut r = vec![0.001; 17];
            let main = if i % 2 == 0 { 3 } else { 9 };
            r[main] = 1.0 - 0.016;
            rows.push(r);
        }
        let others: Vec<usize> = (0..17).filter(|c| *c != 3 && *c != 9).collect();
        for &c in &others[..15] {
            let mut r = vec![0.001; 17];
            r[c] = 0.6;
            r[9] = 0.3;
            let sum: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= sum);
            rows.push(r);
        }
        let h = harden(&matrix(&rows), 0.02).unwrap();
        assert_eq!(h.k_eff(), 2);
        assert_eq!(h.surviving, vec![3, 9]);
        assert!(h.partition.labels()[100..].iter().all(|&l| l == 1));
    }

    #[test]
    fn uniform_rows_collapse_to_one_cluster() {
        let rows = vec![vec![0.25; 4]; 10];
        let h = harden(&matrix(&rows), 0.02).unwrap();
        assert_eq!(h.k_eff(), 1);
        assert!(h.partition.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn duplicated_columns_merge_into_the_lowest() {
        // Two communities, each spread evenly over two columns.
        let mut rows = Vec::new();
        for i in 0..8 {
            let jitter = 0.01 * (i % 3) as f64;
            rows.push(if i < 4 {
                vec![0.25 + jitter, 0.0, 0.25 - jitter, 0.5]
            } else {
                vec![0.0, 0.5 + jitter, 0.0, 0.5 - jitter]
            });
        }
        // Column 3 is shared by both communities and must stay apart.
        let s = matrix(&rows);
        let merged = merge_columns(&s, 0.95).unwrap();
        assert_eq!(merged.row(0), &[0.5, 0.0, 0.0, 0.5]);
        assert!(merged.row(5)[2] == 0.0 && merged.row(5)[0] == 0.0);
        let h = harden(&merged, 0.02).unwrap();
        assert_eq!(h.k_eff(), 2);
    }

    #[test]
    fn merging_disabled_or_one_hot_is_identity() {
        let rows: Vec<Vec<f64>> = [0, 1, 2, 0, 1, 2]
            .iter()
            .map(|&c| (0..3).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect();
        let s = matrix(&rows);
        assert_eq!(merge_columns(&s, 0.9).unwrap(), s);
        let soft = matrix(&vec![vec![0.3, 0.3, 0.4]; 4]);
        assert_eq!(merge_columns(&soft, 1.5).unwrap(), soft);
        let all = merge_columns(&soft, 0.9).unwrap();
        assert!(all.row(2)[0] == 1.0 && all.row(2)[1] == 0.0);
    }

    #[test]
    fn nothing_survives_is_degenerate() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(harden(&matrix(&rows), 0.02), Err(Error::DegeneratePartition(_))));
    }
}
