use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Mean over anchors of
/// `−log( exp(s⁺/τ) / (exp(s⁺/τ) + Σ exp(s⁻/τ)) )`,
/// where `s` are inner products between rows of `embeddings`, the positive
/// of row `i` is row `pair_map[i]` and every other row is a negative.
/// `temperature = 1` gives the raw inner-product form.
pub fn contrastive_loss(tape: &mut Tape, embeddings: Var, pair_map: &[usize], temperature: f64) -> Result<Var> {
    let (n, _) = tape.value(embeddings).dims2()?;
    if n < 3 {
        return Err(Error::Argument(format!("batch of {n} has no negatives")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument(format!("temperature {temperature} must be positive")));
    }
    if pair_map.len() != n {
        return Err(Error::Shape(format!("{} positives for {n} anchors", pair_map.len())));
    }
    let transposed = tape.transpose(embeddings)?;
    let sims = tape.matmul(embeddings, transposed)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;
    tape.cross_entropy_rows(logits, pair_map, true)
}

/// [`contrastive_loss`] evaluated without recording gradients.
pub fn contrastive_loss_value(embeddings: &Tensor, pair_map: &[usize], temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone());
    let loss = contrastive_loss(&mut tape, e, pair_map, temperature)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PAIRS4: [usize; 4] = [1, 0, 3, 2];

    fn unit_rows(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random_unit(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn identical_embeddings_give_log_n_minus_one() {
        let e = unit_rows(&[&[0.6, 0.8][..]; 4]);
        let loss = contrastive_loss_value(&e, &PAIRS4, 1.0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((loss - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_negatives_direct_evaluation() {
        let e = unit_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let loss = contrastive_loss_value(&e, &PAIRS4, 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn saturated_case_is_near_zero() {
        let e = unit_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0], &[-1.0, 0.0]]);
        let loss = contrastive_loss_value(&e, &PAIRS4, 0.1).unwrap();
        assert!(loss >= 0.0 && loss <= 1e-8, "{loss}");
    }

    #[test]
    fn too_small_batch_rejected() {
        let e = unit_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(contrastive_loss_value(&e, &[1, 0], 1.0), Err(Error::Argument(_))));
        let e = unit_rows(&[&[1.0, 0.0][..]; 4]);
        assert!(contrastive_loss_value(&e, &PAIRS4, 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let e = random_unit(6, 5, &mut rng);
            let pairs = [1, 0, 3, 2, 5, 4];
            let report = grad_check(
                |tape, vars| {
                    let n = tape.l2_normalize_rows(vars[0])?;
                    contrastive_loss(tape, n, &pairs, 0.5)
                },
                &[e],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn raising_positive_similarity_lowers_loss() {
        // Anchor 0/1 positives at angle a; negatives fixed along the third axis.
        let at = |a: f64| {
            unit_rows(&[
                &[1.0, 0.0, 0.0],
                &[a.cos(), a.sin(), 0.0],
                &[0.0, 0.0, 1.0],
                &[0.0, 0.6, 0.8],
            ])
        };
        let pairs = [1, 0, 3, 2];
        let mut last = f64::INFINITY;
        for step in (0..=10).rev() {
            let loss = contrastive_loss_value(&at(step as f64 * 0.1), &pairs, 0.5).unwrap();
            assert!(loss < last);
            last = loss;
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_unit(8, 4, &mut rng);
            let pairs: Vec<usize> = (0..8).map(|i| i ^ 1).collect();
            let base = contrastive_loss_value(&e, &pairs, 0.5).unwrap();

            let mut perm: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            // Row perm[i] of the new batch is old row i.
            let mut inv = vec![0; 8];
            for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
            let rows: Vec<Vec<f64>> = (0..8).map(|j| e.row(inv[j]).to_vec()).collect();
            let permuted = Tensor::from_rows(&rows).unwrap();
            let new_pairs: Vec<usize> = (0..8).map(|j| perm[pairs[inv[j]]]).collect();
            let shuffled = contrastive_loss_value(&permuted, &new_pairs, 0.5).unwrap();
            prop_assert!((base - shuffled).abs() < 1e-12);
        }
    }
}
