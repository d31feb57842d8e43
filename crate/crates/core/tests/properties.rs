use condeepmod::autodiff::{Tape, Tensor};
use condeepmod::dsp::{frame, Waveform};
use condeepmod::eval::{cluster_purity, match_and_score, si_snr};
use condeepmod::graph::{conductance, modularity_oracle, Partition, SimilarityGraph};
use condeepmod::separation::{apply_masks, masks_from_partition, MaskSet};
use proptest::prelude::*;

fn graph_strategy() -> impl Strategy<Value = SimilarityGraph> {
    (3usize..25).prop_flat_map(|n| {
        prop::collection::vec((0..n, 0..n), 1..60).prop_filter_map("needs an edge", move |pairs| {
            let edges: Vec<(usize, usize)> = pairs.into_iter().filter(|(a, b)| a != b).collect();
            if edges.is_empty() {
                None
            } else {
                SimilarityGraph::from_edges(n, &edges).ok()
            }
        })
    })
}

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 24)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 6], data).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).rows() {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn conductance_and_modularity_stay_in_range(g in graph_strategy(), seed in any::<u64>()) {
        let k = 1 + (seed % 4) as usize;
        let labels: Vec<usize> = (0..g.n()).map(|i| ((seed >> (i % 60)) as usize + i) % k).collect();
        let p = Partition::new(labels, k).unwrap();
        let q = modularity_oracle(&g, &p).unwrap();
        prop_assert!((-0.5 - 1e-12..=1.0).contains(&q));
        for c in 0..k {
            let members = p.members(c);
            if members.is_empty() || members.len() == g.n() {
                continue;
            }
            if let Ok(phi) = conductance(&g, &members) {
                prop_assert!((0.0..=1.0).contains(&phi));
            }
        }
    }

    #[test]
    fn permuting_masks_permutes_estimates(samples in signal(900), cut in 1usize..10) {
        let w = Waveform::new(samples, 8000).unwrap();
        let fm = frame(&w, 128, 32).unwrap();
        let labels: Vec<usize> = (0..fm.n_frames()).map(|i| (i / cut) % 3).collect();
        let masks = masks_from_partition(&Partition::new(labels, 3).unwrap()).unwrap();
        let order = [2usize, 0, 1];
        let permuted = MaskSet::new(order.iter().map(|&c| masks.mask(c).to_vec()).collect()).unwrap();
        let a = apply_masks(&w, &fm, &masks).unwrap();
        let b = apply_masks(&w, &fm, &permuted).unwrap();
        let covered = fm.covered_len();
        for (slot, &c) in order.iter().enumerate() {
            prop_assert_eq!(&b[slot].samples()[..covered], &a[c].samples()[..covered]);
        }
        for t in 0..covered {
            let sum: f64 = a.iter().map(|e| e.samples()[t]).sum();
            prop_assert!((sum - w.samples()[t]).abs() <= 1e-12 * w.samples()[t].abs().max(1.0));
        }
    }

    #[test]
    fn si_snr_ignores_scale(est in signal(64), reference in signal(64), alpha in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let base = si_snr(&est, &reference).unwrap();
        let scaled: Vec<f64> = est.iter().map(|v| v * alpha).collect();
        let again = si_snr(&scaled, &reference).unwrap();
        // A negative factor flips the projection sign, which the ratio ignores.
        prop_assert!((base - again).abs() <= 1e-9);
    }

    #[test]
    fn matching_ignores_estimate_order(a in signal(80), b in signal(80), c in signal(80), r1 in signal(80), r2 in signal(80)) {
        let mixture: Vec<f64> = r1.iter().zip(&r2).map(|(x, y)| x + y).collect();
        let refs: Vec<&[f64]> = vec![&r1, &r2];
        let one = match_and_score(&[&a, &b, &c], &refs, &mixture).unwrap();
        let two = match_and_score(&[&c, &a, &b], &refs, &mixture).unwrap();
        prop_assert!((one.si_snr_db - two.si_snr_db).abs() <= 1e-12);
        prop_assert!((one.sdr_db - two.sdr_db).abs() <= 1e-12);
    }

    #[test]
    fn mixture_as_every_estimate_scores_zero_improvement(r1 in signal(50), r2 in signal(50)) {
        let mixture: Vec<f64> = r1.iter().zip(&r2).map(|(x, y)| x + y).collect();
        let score = match_and_score(&[&mixture, &mixture], &[&r1, &r2], &mixture).unwrap();
        prop_assert_eq!(score.si_snri_db, 0.0);
        prop_assert_eq!(score.sdri_db, 0.0);
    }

    #[test]
    fn purity_is_bounded(labels in prop::collection::vec(0usize..4, 30), oracle in prop::collection::vec(0usize..3, 30)) {
        let k_true = oracle.iter().collect::<std::collections::BTreeSet<_>>().len();
        let p = cluster_purity(&labels, &oracle).unwrap();
        prop_assert!(p >= 1.0 / k_true as f64 - 1e-12 && p <= 1.0);
    }
}
