//! Ranking and summary statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann–Whitney statistic; tied scores count ½.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Input(format!("AUC needs binary labels, found {y}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("AUC scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("AUC needs both classes present".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of positives, ties sharing their average rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos = order[i..j].iter().filter(|&&r| labels[r] == 1).count();
        rank_sum += avg_rank * pos as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean and Student-t 95% half-width with `n − 1` degrees of freedom.
pub fn ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Input(format!("confidence interval needs at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Input(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / (n as f64).sqrt()))
}

/// Per-trial values of one metric with their mean and 95% half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAggregate {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// `None` with fewer than two trials.
    pub ci95_halfwidth: Option<f64>,
}

impl TrialAggregate {
    pub fn new(metric: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("aggregate over zero trials".into()));
        }
        let (mean, hw) = match ci95(&values) {
            Ok((m, h)) => (m, Some(h)),
            Err(_) => (values[0], None),
        };
        Ok(Self {
            metric: metric.into(),
            values,
            mean,
            ci95_halfwidth: hw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    // Brute-force pair counting.
    fn auc_pairs(s: &[f64], y: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn ci95_examples() {
        assert_eq!(ci95(&[2.0; 5]).unwrap(), (2.0, 0.0));
        let (m, h) = ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        // t(0.975, 1) = 12.7062; sd = 1/√2; half-width = t·sd/√2 = t/2.
        assert!((h - 6.353_102).abs() < 1e-5, "{h}");
        let (m, _) = ci95(&[1.0, 2.0, 4.0, 6.0, 7.0]).unwrap();
        assert_eq!(m, 4.0);
        assert!(ci95(&[1.0]).is_err());
    }

    #[test]
    fn aggregate_single_trial_has_no_ci() {
        let a = TrialAggregate::new("acc", vec![0.8]).unwrap();
        assert_eq!(a.mean, 0.8);
        assert_eq!(a.ci95_halfwidth, None);
        let a = TrialAggregate::new("acc", vec![0.8, 0.8]).unwrap();
        assert_eq!(a.ci95_halfwidth, Some(0.0));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(data in proptest::collection::vec((0u8..6, 0usize..2), 2..60)) {
            let s: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let y: Vec<usize> = data.iter().map(|d| d.1).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            prop_assert!((auc(&s, &y).unwrap() - auc_pairs(&s, &y)).abs() < 1e-12);
        }

        #[test]
        fn auc_monotone_invariant_and_complement(data in proptest::collection::vec((-5.0f64..5.0, 0usize..2), 2..60)) {
            let s: Vec<f64> = data.iter().map(|d| d.0).collect();
            let y: Vec<usize> = data.iter().map(|d| d.1).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let a = auc(&s, &y).unwrap();
            let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            prop_assert!((a - auc(&t, &y).unwrap()).abs() < 1e-12);
            let mut dedup = s.clone();
            dedup.sort_by(f64::total_cmp);
            dedup.dedup();
            if dedup.len() == s.len() {
                let neg: Vec<f64> = s.iter().map(|v| -v).collect();
                prop_assert!((a + auc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
