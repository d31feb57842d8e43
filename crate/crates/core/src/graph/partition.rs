use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Hard cluster labels in `[0, k)`; clusters may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Argument(format!("label {l} at node {i} outside [0, {k})")));
        }
        Ok(Self { labels, k })
    }

    /// Uses `max(label) + 1` clusters.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        Self { labels, k }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Nodes of cluster `c` in ascending order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels[i] == c).collect()
    }

    /// `n × columns` one-hot assignment matrix.
    pub fn one_hot(&self, columns: usize) -> Result<Tensor> {
        if columns < self.k {
            return Err(Error::Shape(format!("{columns} columns for {} clusters", self.k)));
        }
        let mut t = Tensor::zeros(&[self.n(), columns]);
        for (i, &l) in self.labels.iter().enumerate() {
            t.data_mut()[i * columns + l] = 1.0;
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_accessors() {
        let p = Partition::new(vec![0, 2, 2, 0], 4).unwrap();
        assert_eq!(p.sizes(), vec![2, 0, 2, 0]);
        assert_eq!(p.members(2), vec![1, 2]);
        assert!(Partition::new(vec![0, 3], 3).is_err());
        assert_eq!(Partition::from_labels(vec![1, 0, 1]).k(), 2);
        let oh = p.one_hot(4).unwrap();
        assert_eq!(oh.row(1), &[0.0, 0.0, 1.0, 0.0]);
        assert!(p.one_hot(3).is_err());
    }
}
