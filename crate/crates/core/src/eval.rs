//! Separation quality metrics with permutation matching, and cluster purity
//! against oracle frame labels.

use serde::{Deserialize, Serialize};

use crate::dsp::{frame_count, Waveform};
use crate::error::{Error, Result};

/// Scores are clamped to `±MAX_DB` so perfect or empty estimates stay finite.
pub const MAX_DB: f64 = 60.0;
/// References beyond this count make brute-force matching too expensive.
pub const MAX_REFERENCES: usize = 5;
pub const MAX_ESTIMATES: usize = 16;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_pair(estimate: &[f64], reference: &[f64]) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    if energy(reference) == 0.0 {
        return Err(Error::Argument("reference signal is all zeros".into()));
    }
    Ok(())
}

/// `10·log10(signal / error)` with the clamp applied, including the limits
/// where either power vanishes.
fn ratio_db(signal: f64, error: f64) -> f64 {
    if signal == 0.0 {
        return -MAX_DB;
    }
    if error == 0.0 {
        return MAX_DB;
    }
    (10.0 * (signal / error).log10()).clamp(-MAX_DB, MAX_DB)
}

/// Scale-invariant SNR: the estimate is projected onto the reference and
/// the projection is compared against the residual.
pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(estimate, reference)?;
    let ref_energy = energy(reference);
    let alpha = estimate.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let mut target = 0.0;
    let mut residual = 0.0;
    for (e, r) in estimate.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        residual += (e - t) * (e - t);
    }
    Ok(ratio_db(target, residual))
}

/// Signal-to-distortion ratio in plain SNR form: `‖s‖² / ‖ŝ − s‖²`.
pub fn sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_pair(estimate, reference)?;
    let error: f64 = estimate.iter().zip(reference).map(|(e, r)| (e - r) * (e - r)).sum();
    Ok(ratio_db(energy(reference), error))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub si_snr_db: f64,
    pub si_snri_db: f64,
    pub sdr_db: f64,
    pub sdri_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationScore {
    pub si_snr_db: f64,
    pub si_snri_db: f64,
    pub sdr_db: f64,
    pub sdri_db: f64,
    /// Estimate matched to each reference; `None` means a silent pad track.
    pub assignment: Vec<Option<usize>>,
    pub per_source: Vec<SourceScore>,
}

/// Visits every injective map from `r` references into `e` slots in
/// lexicographic order.
fn for_each_injection(r: usize, e: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(depth: usize, r: usize, e: usize, used: &mut [bool], cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if depth == r {
            f(cur);
            return;
        }
        for s in 0..e {
            if !used[s] {
                used[s] = true;
                cur.push(s);
                rec(depth + 1, r, e, used, cur, f);
                cur.pop();
                used[s] = false;
            }
        }
    }
    rec(0, r, e, &mut vec![false; e], &mut Vec::with_capacity(r), f);
}

/// Matches estimates to references by brute force, maximizing mean SI-SNR.
/// With fewer estimates than references the estimates are padded with
/// silence. Improvements are relative to using the mixture as every
/// estimate. All signals must have equal length.
pub fn match_and_score(estimates: &[&[f64]], references: &[&[f64]], mixture: &[f64]) -> Result<SeparationScore> {
    if estimates.is_empty() || references.is_empty() {
        return Err(Error::EmptyInput("need at least one estimate and one reference".into()));
    }
    if references.len() > MAX_REFERENCES || estimates.len() > MAX_ESTIMATES {
        return Err(Error::Argument(format!(
            "{} references and {} estimates exceed the {MAX_REFERENCES}/{MAX_ESTIMATES} limits",
            references.len(),
            estimates.len()
        )));
    }
    let len = mixture.len();
    if estimates.iter().chain(references).any(|s| s.len() != len) {
        return Err(Error::Shape("estimates, references and mixture differ in length".into()));
    }
    let silence = vec![0.0; len];
    let slots = estimates.len().max(references.len());
    let track = |s: usize| if s < estimates.len() { estimates[s] } else { silence.as_slice() };

    let mut si = vec![vec![0.0; slots]; references.len()];
    for (r, reference) in references.iter().enumerate() {
        for (s, row) in si[r].iter_mut().enumerate() {
            *row = si_snr(track(s), reference)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for_each_injection(references.len(), slots, &mut |map| {
        let total: f64 = map.iter().enumerate().map(|(r, &s)| si[r][s]).sum();
        if best.as_ref().map_or(true, |(b, _)| total > *b) {
            best = Some((total, map.to_vec()));
        }
    });
    let (_, map) = best.expect("at least one injection");

    let mut per_source = Vec::with_capacity(references.len());
    for (r, reference) in references.iter().enumerate() {
        let est = track(map[r]);
        let si_snr_db = si[r][map[r]];
        let sdr_db = sdr(est, reference)?;
        per_source.push(SourceScore {
            si_snr_db,
            si_snri_db: si_snr_db - si_snr(mixture, reference)?,
            sdr_db,
            sdri_db: sdr_db - sdr(mixture, reference)?,
        });
    }
    let mean = |f: fn(&SourceScore) -> f64| per_source.iter().map(f).sum::<f64>() / per_source.len() as f64;
    Ok(SeparationScore {
        si_snr_db: mean(|s| s.si_snr_db),
        si_snri_db: mean(|s| s.si_snri_db),
        sdr_db: mean(|s| s.sdr_db),
        sdri_db: mean(|s| s.sdri_db),
        assignment: map.iter().map(|&s| (s < estimates.len()).then_some(s)).collect(),
        per_source,
    })
}

/// Waveform convenience over [`match_and_score`], scoring the first `len`
/// samples of every signal.
pub fn match_and_score_waveforms(
    estimates: &[Waveform],
    references: &[Waveform],
    mixture: &Waveform,
    len: usize,
) -> Result<SeparationScore> {
    let cut = |w: &Waveform| -> Result<Vec<f64>> {
        w.samples()
            .get(..len)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Shape(format!("signal of {} samples shorter than {len}", w.len())))
    };
    let est = estimates.iter().map(cut).collect::<Result<Vec<_>>>()?;
    let refs = references.iter().map(cut).collect::<Result<Vec<_>>>()?;
    let mix = cut(mixture)?;
    let est: Vec<&[f64]> = est.iter().map(Vec::as_slice).collect();
    let refs: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
    match_and_score(&est, &refs, &mix)
}

/// Fraction of nodes whose cluster's majority oracle label matches their own.
pub fn cluster_purity(labels: &[usize], oracle: &[usize]) -> Result<f64> {
    if labels.len() != oracle.len() {
        return Err(Error::Shape(format!("{} labels for {} oracle labels", labels.len(), oracle.len())));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("no labels".into()));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let t = oracle.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![vec![0usize; t]; k];
    for (&l, &o) in labels.iter().zip(oracle) {
        counts[l][o] += 1;
    }
    let majority: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / labels.len() as f64)
}

/// Index of the source with the most energy in each frame (lowest index on ties).
pub fn oracle_frame_labels(sources: &[Waveform], frame_len: usize, hop: usize) -> Result<Vec<usize>> {
    let first = sources
        .first()
        .ok_or_else(|| Error::EmptyInput("no sources".into()))?;
    if sources.iter().any(|s| s.len() != first.len()) {
        return Err(Error::Shape("sources differ in length".into()));
    }
    let n = frame_count(first.len(), frame_len, hop);
    Ok((0..n)
        .map(|i| {
            let span = i * hop..i * hop + frame_len;
            let mut best = 0;
            let mut best_e = f64::NEG_INFINITY;
            for (c, s) in sources.iter().enumerate() {
                let e = energy(&s.samples()[span.clone()]);
                if e > best_e {
                    best = c;
                    best_e = e;
                }
            }
            best
        })
        .collect())
}

/// Ranks starting at 1; tied values share the mean of their ranks.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of the average ranks.
/// Errors when either series is constant, where the coefficient is undefined.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} values against {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("need at least two paired values".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Argument("series contain non-finite values".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Argument("rank correlation of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(len: usize, f: f64, phase: f64) -> Vec<f64> {
        (0..len).map(|i| (f * i as f64 + phase).sin()).collect()
    }

    #[test]
    fn si_snr_fixtures() {
        let s = tone(500, 0.05, 0.3);
        assert_eq!(si_snr(&s, &s).unwrap(), 60.0);
        let doubled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&doubled, &s).unwrap(), si_snr(&s, &s).unwrap());
        let a = [1.0, 0.0, 1.0, 0.0];
        let b = [0.0, 1.0, 0.0, 1.0];
        assert_eq!(si_snr(&a, &b).unwrap(), -60.0);
        assert!(matches!(si_snr(&a, &[0.0; 4]), Err(Error::Argument(_))));
        assert!(matches!(si_snr(&a, &[1.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn sdr_fixtures() {
        let s = tone(400, 0.07, 0.0);
        assert_eq!(sdr(&s, &s).unwrap(), 60.0);
        // Noise with exactly 1/100 of the signal power.
        let raw = tone(400, 1.3, 1.0);
        let scale = (energy(&s) / 100.0 / energy(&raw)).sqrt();
        let noisy: Vec<f64> = s.iter().zip(&raw).map(|(a, b)| a + scale * b).collect();
        assert!((sdr(&noisy, &s).unwrap() - 20.0).abs() < 1e-6);
        let doubled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert!(sdr(&doubled, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn swapped_estimates_match_perfectly() {
        let a = tone(300, 0.05, 0.0);
        let b = tone(300, 0.31, 1.0);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let score = match_and_score(&[&b, &a], &[&a, &b], &mix).unwrap();
        assert_eq!(score.assignment, vec![Some(1), Some(0)]);
        assert_eq!(score.si_snr_db, 60.0);
    }

    #[test]
    fn mixture_estimates_have_zero_improvement() {
        let a = tone(300, 0.05, 0.0);
        let b = tone(300, 0.31, 1.0);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let score = match_and_score(&[&mix, &mix], &[&a, &b], &mix).unwrap();
        assert_eq!(score.si_snri_db, 0.0);
        assert_eq!(score.sdri_db, 0.0);
    }

    #[test]
    fn missing_estimates_padded_with_silence() {
        let a = tone(300, 0.05, 0.0);
        let b = tone(300, 0.31, 1.0);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let score = match_and_score(&[&b], &[&a, &b], &mix).unwrap();
        assert_eq!(score.assignment, vec![None, Some(0)]);
        assert_eq!(score.per_source[0].si_snr_db, -60.0);
    }

    #[test]
    fn spearman_fixtures() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[5.0, 3.0, 2.0, 1.0, -7.0]).unwrap() + 1.0).abs() < 1e-12);
        // Rank differences (0, 0, 1, -1, 0): 1 − 6·2 / (5·24) = 0.9.
        assert!((spearman(&x, &[10.0, 20.0, 40.0, 30.0, 50.0]).unwrap() - 0.9).abs() < 1e-12);
        // Ties: ranks of y are (1.5, 1.5, 3); Pearson of (1,2,3) with them is √3/2.
        assert!((spearman(&[1.0, 2.0, 3.0], &[7.0, 7.0, 9.0]).unwrap() - 3f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(spearman(&x, &[1.0; 5]).is_err());
        assert!(spearman(&x[..1], &x[..1]).is_err());
        assert!(spearman(&x, &x[..4]).is_err());
    }

    #[test]
    fn purity_fixtures() {
        assert_eq!(cluster_purity(&[0, 1, 1, 0], &[1, 0, 0, 1]).unwrap(), 1.0);
        assert_eq!(cluster_purity(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(cluster_purity(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn oracle_labels_follow_energy() {
        let mut a = vec![0.0; 512];
        let mut b = vec![0.0; 512];
        a[..256].iter_mut().for_each(|v| *v = 1.0);
        b[256..].iter_mut().for_each(|v| *v = 0.5);
        let w = |s: Vec<f64>| Waveform::new(s, 8000).unwrap();
        let labels = oracle_frame_labels(&[w(a), w(b)], 256, 128).unwrap();
        assert_eq!(labels, vec![0, 0, 1]);
    }

    proptest! {
        #[test]
        fn si_snr_scale_invariant(seed in 0u64..1000, alpha in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
            let r = tone(256, 0.01 + seed as f64 * 1e-3, 0.2);
            let e: Vec<f64> = r.iter().enumerate().map(|(i, v)| v + 0.3 * ((i * 31 % 17) as f64 / 17.0 - 0.5)).collect();
            let scaled: Vec<f64> = e.iter().map(|v| alpha * v).collect();
            let (a, b) = (si_snr(&e, &r).unwrap(), si_snr(&scaled, &r).unwrap());
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn matching_ignores_estimate_order(shift in 0usize..3) {
            let refs = [tone(200, 0.05, 0.0), tone(200, 0.2, 1.0), tone(200, 0.41, 2.0)];
            let mix: Vec<f64> = (0..200).map(|i| refs.iter().map(|r| r[i]).sum()).collect();
            let est: Vec<Vec<f64>> = refs.iter().map(|r| r.iter().zip(&mix).map(|(a, m)| 0.8 * a + 0.1 * m).collect()).collect();
            let order: Vec<&[f64]> = (0..3).map(|i| est[(i + shift) % 3].as_slice()).collect();
            let base: Vec<&[f64]> = est.iter().map(Vec::as_slice).collect();
            let ref_s: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
            let a = match_and_score(&base, &ref_s, &mix).unwrap();
            let b = match_and_score(&order, &ref_s, &mix).unwrap();
            prop_assert_eq!(a.si_snr_db, b.si_snr_db);
            prop_assert_eq!(a.per_source, b.per_source);
        }

        #[test]
        fn purity_bounds(labels in proptest::collection::vec(0usize..4, 1..40), seed in 0usize..3) {
            let oracle: Vec<usize> = labels.iter().enumerate().map(|(i, _)| (i + seed) % 3).collect();
            let p = cluster_purity(&labels, &oracle).unwrap();
            let k_true = oracle.iter().collect::<std::collections::BTreeSet<_>>().len();
            prop_assert!(p <= 1.0 && p >= 1.0 / k_true as f64 - 1e-12);
        }
    }
}
