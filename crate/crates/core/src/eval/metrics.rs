//! Binary classification metrics and uncertainty-threshold accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored prediction. `score` is the probability of the positive
/// (more impaired) class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub truth: usize,
    pub predicted: usize,
    pub score: f64,
    /// Dirichlet uncertainty `K/S`; absent for a softmax head.
    pub uncertainty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// `None` when nothing was predicted positive.
    pub precision: Option<f64>,
    /// `None` when no positives are present.
    pub sensitivity: Option<f64>,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n: usize,
}

/// Threshold metrics from predicted labels; AUC from the Mann–Whitney
/// rank statistic with ties counted one half.
pub fn compute_metrics(preds: &[Prediction]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Data("metrics over an empty prediction set".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for p in preds {
        match (p.truth, p.predicted) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (0, 0) => tn += 1,
            (1, 0) => fn_ += 1,
            (t, q) => return Err(Error::Data(format!("non-binary prediction {q} / truth {t}"))),
        }
        if !p.score.is_finite() {
            return Err(Error::Numeric(format!("non-finite score for {}", p.id)));
        }
    }
    let n = preds.len();
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let scored: Vec<(f64, usize)> = preds.iter().map(|p| (p.score, p.truth)).collect();
    Ok(MetricsReport {
        acc: (tp + tn) as f64 / n as f64,
        precision: ratio(tp, tp + fp),
        sensitivity: ratio(tp, tp + fn_),
        auc: rank_auc(&scored),
        tp,
        fp,
        tn,
        fn_,
        n,
    })
}

/// Mann–Whitney AUC over `(score, truth)` pairs using mid-ranks for ties.
pub fn rank_auc(scored: &[(f64, usize)]) -> Option<f64> {
    let n_pos = scored.iter().filter(|s| s.1 == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| scored[k].1 == 1).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub count: usize,
    /// `None` for an empty bucket.
    pub accuracy: Option<f64>,
}

/// Accuracy over the predictions with `u ≤ t` for each threshold.
pub fn uncertainty_threshold_report(preds: &[Prediction], thresholds: &[f64]) -> Result<Vec<ThresholdRow>> {
    let us: Vec<f64> = preds
        .iter()
        .map(|p| {
            p.uncertainty
                .ok_or_else(|| Error::Data(format!("prediction {} carries no uncertainty", p.id)))
        })
        .collect::<Result<_>>()?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (count, correct) = preds
                .iter()
                .zip(&us)
                .filter(|(_, u)| **u <= t)
                .fold((0, 0), |(n, c), (p, _)| (n + 1, c + usize::from(p.predicted == p.truth)));
            ThresholdRow {
                threshold: t,
                count,
                accuracy: (count > 0).then(|| correct as f64 / count as f64),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(truth: usize, predicted: usize, score: f64, u: f64) -> Prediction {
        Prediction {
            id: String::new(),
            truth,
            predicted,
            score,
            uncertainty: Some(u),
        }
    }

    #[test]
    fn perfect_predictions() {
        let p = vec![pred(1, 1, 0.9, 0.1), pred(1, 1, 0.8, 0.2), pred(0, 0, 0.2, 0.1), pred(0, 0, 0.1, 0.3)];
        let m = compute_metrics(&p).unwrap();
        assert_eq!(m.acc, 1.0);
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.auc, Some(1.0));
        assert_eq!((m.tp, m.fp, m.tn, m.fn_, m.n), (2, 0, 2, 0, 4));
    }

    #[test]
    fn undefined_flags() {
        let p = vec![pred(0, 0, 0.2, 0.5), pred(0, 0, 0.3, 0.5)];
        let m = compute_metrics(&p).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.precision, None);
        assert_eq!(m.sensitivity, None);
        assert!(compute_metrics(&[]).is_err());
    }

    fn brute_auc(s: &[(f64, usize)]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for a in s.iter().filter(|x| x.1 == 1) {
            for b in s.iter().filter(|x| x.1 == 0) {
                den += 1.0;
                num += if a.0 > b.0 {
                    1.0
                } else if a.0 == b.0 {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    fn trapezoid_auc(s: &[(f64, usize)]) -> f64 {
        let mut thresholds: Vec<f64> = s.iter().map(|x| x.0).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let p = s.iter().filter(|x| x.1 == 1).count() as f64;
        let q = s.len() as f64 - p;
        let mut pts = vec![(0.0, 0.0)];
        for t in thresholds {
            let tp = s.iter().filter(|x| x.1 == 1 && x.0 >= t).count() as f64;
            let fp = s.iter().filter(|x| x.1 == 0 && x.0 >= t).count() as f64;
            pts.push((fp / q, tp / p));
        }
        pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }

    #[test]
    fn rank_auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s: Vec<(f64, usize)> = (0..50)
                .map(|i| ((rng.gen_range(0..20) as f64) / 20.0, usize::from(i % 3 == 0)))
                .collect();
            assert!((rank_auc(&s).unwrap() - brute_auc(&s)).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rank_auc_equals_trapezoid_roc(
            s in prop::collection::vec((0u32..30, 0usize..2), 2..60)
        ) {
            let s: Vec<(f64, usize)> = s.into_iter().map(|(a, y)| (a as f64 / 7.0, y)).collect();
            if let Some(a) = rank_auc(&s) {
                prop_assert!((a - trapezoid_auc(&s)).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn threshold_report_examples() {
        let p = vec![pred(1, 1, 0.9, 0.3), pred(0, 1, 0.6, 0.3), pred(0, 0, 0.1, 0.3)];
        let rows = uncertainty_threshold_report(&p, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rows[0].count, 0);
        assert_eq!(rows[0].accuracy, None);
        for r in &rows[1..] {
            assert_eq!(r.count, 3);
            assert_eq!(r.accuracy, Some(2.0 / 3.0));
        }
        assert_eq!(rows[4].accuracy, Some(compute_metrics(&p).unwrap().acc));
    }

    #[test]
    fn full_threshold_reproduces_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<Prediction> = (0..40)
            .map(|_| pred(rng.gen_range(0..2), rng.gen_range(0..2), rng.gen(), rng.gen_range(0.01..1.0)))
            .collect();
        let rows = uncertainty_threshold_report(&p, &[1.0]).unwrap();
        assert_eq!(rows[0].accuracy, Some(compute_metrics(&p).unwrap().acc));
    }
}
