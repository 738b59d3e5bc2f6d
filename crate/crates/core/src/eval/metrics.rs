//! Ranking and thresholded classification metrics.

use serde::{Deserialize, Serialize};

use crate::detection::VideoRecord;
use crate::error::{Error, Result};

/// A video with its classifier score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredVideo {
    pub video_id: String,
    pub label: u8,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predicted: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Invariant(format!("score {i} is not finite: {}", scores[i])));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Invariant(format!("label {i} is {}, expected 0 or 1", labels[i])));
    }
    Ok(())
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half. Computed as `(2 wins + ties) / (2 P N)` from exact
/// integer counts.
pub fn auc_of(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let (p, n) = class_counts(labels)?;
    let order = ascending(scores);
    let (mut twice, mut neg_below) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        twice += 2 * pos_here * neg_below + pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    Ok(twice as f64 / (2 * p as u128 * n as u128) as f64)
}

pub fn auc(scored: &[ScoredVideo]) -> Result<f64> {
    let (scores, labels) = split(scored);
    auc_of(&scores, &labels)
}

fn split(scored: &[ScoredVideo]) -> (Vec<f64>, Vec<u8>) {
    scored.iter().map(|s| (s.score, s.label)).unzip()
}

/// Threshold maximizing `(sensitivity + specificity) / 2` under the rule
/// `score >= threshold`, over `-inf`, midpoints between adjacent distinct scores,
/// and `+inf`. Ties go to the lowest threshold.
pub fn select_threshold_of(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let (p, n) = class_counts(labels)?;
    let order = ascending(scores);
    // At a cut below group i: positives predicted = those at or above it.
    // Balanced accuracy * 2PN = tp * N + tn * P, compared exactly.
    let (mut tp, mut tn) = (p as u128, 0u128);
    let objective = |tp: u128, tn: u128| tp * n as u128 + tn * p as u128;
    let mut best = (objective(tp, tn), f64::NEG_INFINITY);
    let mut i = 0;
    while i < order.len() {
        let lo = scores[order[i]];
        while i < order.len() && scores[order[i]] == lo {
            if labels[order[i]] == 1 {
                tp -= 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        let threshold = match order.get(i) {
            Some(&k) => {
                let hi = scores[k];
                let mid = lo + (hi - lo) / 2.0;
                if mid > lo {
                    mid
                } else {
                    hi
                }
            }
            None => f64::INFINITY,
        };
        let value = objective(tp, tn);
        if value > best.0 {
            best = (value, threshold);
        }
    }
    Ok(best.1)
}

pub fn select_threshold(val_scored: &[ScoredVideo]) -> Result<f64> {
    let (scores, labels) = split(val_scored);
    select_threshold_of(&scores, &labels)
}

/// Fills `predicted` with `score >= threshold`.
pub fn apply_threshold(scored: &mut [ScoredVideo], threshold: f64) {
    for s in scored {
        s.predicted = Some(u8::from(s.score >= threshold));
    }
}

/// Metrics at a fixed threshold, with `score >= threshold` predicted positive.
pub fn confusion_metrics(scored: &[ScoredVideo], threshold: f64) -> Result<MetricsReport> {
    let (scores, labels) = split(scored);
    let auc = auc_of(&scores, &labels)?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (s, l) in scores.iter().zip(&labels) {
        match (*s >= threshold, *l == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(MetricsReport {
        auc,
        threshold,
        sensitivity: tp as f64 / (tp + fn_) as f64,
        specificity: tn as f64 / (tn + fp) as f64,
        accuracy: (tp + tn) as f64 / scored.len() as f64,
        n_pos: tp + fn_,
        n_neg: tn + fp,
    })
}

/// Two-sided exact McNemar test on the discordant counts `b` and `c`:
/// `min(1, 2 P(X <= min(b, c)))` with `X ~ Binomial(b + c, 1/2)`.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k_max = b.min(c);
    let ln2n = n as f64 * std::f64::consts::LN_2;
    // log C(n, k) built incrementally, tail summed by log-sum-exp.
    let mut terms = Vec::with_capacity(k_max as usize + 1);
    let mut log_c = 0.0;
    for k in 0..=k_max {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        terms.push(log_c - ln2n);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    (2.0 * tail.exp()).min(1.0)
}

/// Mean over frames of the highest detection confidence, 0 for frames without boxes.
pub fn baseline_detector_frame_avg(record: &VideoRecord) -> f64 {
    let frames = record.frames();
    let total: f64 = frames
        .iter()
        .map(|f| f.boxes.iter().map(|b| b.confidence()).fold(0.0, f64::max))
        .sum();
    total / frames.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{BoundingBox, FrameDetections};
    use proptest::prelude::*;

    fn scored(scores: &[f64], labels: &[u8]) -> Vec<ScoredVideo> {
        scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&score, &label))| ScoredVideo {
                video_id: format!("v{i}"),
                label,
                score,
                predicted: None,
            })
            .collect()
    }

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1;
                    twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_of(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc_of(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc_of(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auc_of(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass { .. })));
        assert!(auc_of(&[f64::NAN, 0.2], &[0, 1]).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert!((select_threshold_of(&[0.2, 0.6, 0.4, 0.9], &[0, 0, 1, 1]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(select_threshold_of(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), f64::NEG_INFINITY);
        let t = select_threshold_of(&[0.1, 0.2, 0.7, 0.8], &[0, 0, 1, 1]).unwrap();
        let m = confusion_metrics(&scored(&[0.1, 0.2, 0.7, 0.8], &[0, 0, 1, 1]), t).unwrap();
        assert_eq!((m.sensitivity, m.specificity), (1.0, 1.0));
    }

    #[test]
    fn threshold_between_adjacent_floats_uses_upper_score() {
        let a = 0.5f64;
        let b = f64::from_bits(a.to_bits() + 1);
        assert_eq!(select_threshold_of(&[a, b], &[0, 1]).unwrap(), b);
    }

    #[test]
    fn confusion_examples() {
        let s = scored(&[0.9, 0.8, 0.1, 0.2, 0.3, 0.05, 0.7], &[1, 1, 1, 0, 0, 0, 0]);
        let m = confusion_metrics(&s, 0.5).unwrap();
        assert!((m.sensitivity - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.specificity, 0.75);
        assert!((m.accuracy - 5.0 / 7.0).abs() < 1e-15);
        assert_eq!((m.n_pos, m.n_neg), (3, 4));
        let low = confusion_metrics(&s, -1.0).unwrap();
        assert_eq!((low.sensitivity, low.specificity), (1.0, 0.0));
        let high = confusion_metrics(&s, 2.0).unwrap();
        assert_eq!((high.sensitivity, high.specificity), (0.0, 1.0));
    }

    #[test]
    fn mcnemar_examples() {
        assert_eq!(mcnemar_exact(0, 0), 1.0);
        assert_eq!(mcnemar_exact(7, 7), 1.0);
        assert!((mcnemar_exact(5, 15) - 2.0 * 21700.0 / 1048576.0).abs() < 1e-12);
        assert!((mcnemar_exact(5, 15) - 0.041390).abs() < 1e-6);
        assert_eq!(mcnemar_exact(0, 1), 1.0);
        assert!((mcnemar_exact(0, 10) - 2.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn mcnemar_matches_integer_tail_for_moderate_counts() {
        for b in 0..40u64 {
            for c in 0..40u64 {
                let n = b + c;
                let mut coeff = 1u128;
                let mut tail = 0u128;
                for k in 0..=b.min(c) {
                    if k > 0 {
                        coeff = coeff * (n - k + 1) as u128 / k as u128;
                    }
                    tail += coeff;
                }
                let exact = if n == 0 { 1.0 } else { (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0) };
                let p = mcnemar_exact(b, c);
                assert!((p - exact).abs() <= 1e-12 * exact.max(1e-300), "b={b} c={c}: {p} vs {exact}");
                assert_eq!(p, mcnemar_exact(c, b));
                assert!(p > 0.0 && p <= 1.0);
            }
        }
    }

    #[test]
    fn mcnemar_large_counts_stay_positive() {
        let p = mcnemar_exact(100, 1000);
        assert!(p > 0.0 && p < 1e-100);
    }

    fn record(maxima: &[Option<f64>]) -> VideoRecord {
        let frames = maxima
            .iter()
            .enumerate()
            .map(|(t, m)| FrameDetections {
                frame_index: t as u64,
                boxes: m
                    .map(|c| vec![BoundingBox::new(0.1, 0.1, 0.2, 0.2, c / 2.0).unwrap(), BoundingBox::new(0.5, 0.5, 0.2, 0.2, c).unwrap()])
                    .unwrap_or_default(),
                gt_boxes: vec![],
            })
            .collect();
        VideoRecord::new("v", 0, frames).unwrap()
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(baseline_detector_frame_avg(&record(&[None, None])), 0.0);
        assert!((baseline_detector_frame_avg(&record(&[Some(0.8); 5])) - 0.8).abs() < 1e-15);
        assert!((baseline_detector_frame_avg(&record(&[Some(0.9), None, Some(0.3)])) - 0.4).abs() < 1e-15);
    }

    fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                prop::collection::vec((0u32..20).prop_map(|k| f64::from(k) / 20.0), n),
                prop::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise_oracle((scores, labels) in labelled()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(auc_of(&scores, &labels).unwrap(), pairwise(&scores, &labels));
        }

        #[test]
        fn auc_invariant_under_monotone_transform((scores, labels) in labelled()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp()).collect();
            prop_assert_eq!(auc_of(&scores, &labels).unwrap(), auc_of(&mapped, &labels).unwrap());
        }

        #[test]
        fn threshold_is_optimal_over_dense_grid((scores, labels) in labelled()) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let s = scored(&scores, &labels);
            let t = select_threshold_of(&scores, &labels).unwrap();
            let m = confusion_metrics(&s, t).unwrap();
            let chosen = m.sensitivity + m.specificity;
            for k in -2..=42 {
                let g = confusion_metrics(&s, f64::from(k) / 40.0).unwrap();
                prop_assert!(g.sensitivity + g.specificity <= chosen + 1e-12);
            }
        }
    }
}
