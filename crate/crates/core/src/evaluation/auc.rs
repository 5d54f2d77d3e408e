//! ROC AUC as the normalized Mann-Whitney U statistic.
//!
//! Ranks are assigned after one sort; tied scores share their average rank,
//! which is equivalent to counting each tied positive/negative pair as 0.5.

use crate::domain::{Label, Probability};
use crate::error::{Error, Result};

pub fn auc(scores: &[Probability], labels: &[Label]) -> Result<f64> {
    let raw: Vec<f64> = scores.iter().map(|p| p.value()).collect();
    auc_from_scores(&raw, labels)
}

/// AUC over arbitrary real scores (higher means more likely MSI).
pub fn auc_from_scores(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes (MSI {n_pos}, MSS {n_neg})"
        )));
    }

    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = idx[i..j].iter().filter(|&&k| labels[k].is_positive()).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        i = j;
    }

    let p = n_pos as f64;
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n_neg as f64))
}

/// ROC curve points `(fpr, tpr)` from the highest threshold down, ties merged.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<(f64, f64)>> {
    auc_from_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|l| l.is_positive()).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]].is_positive() {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        points.push((fp / n_neg, tp / n_pos));
        i = j;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Msi, Mss};

    #[test]
    fn perfect_separation() {
        let a = auc_from_scores(&[0.9, 0.8, 0.1, 0.2], &[Msi, Msi, Mss, Mss]).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn all_ties_is_half() {
        let a = auc_from_scores(&[0.3; 6], &[Msi, Mss, Mss, Msi, Mss, Mss]).unwrap();
        assert_eq!(a, 0.5);
    }

    #[test]
    fn known_value() {
        // pos {3, 5}, neg {1, 2, 4}: 5 of 6 pairs ordered correctly
        let a = auc_from_scores(&[3.0, 5.0, 1.0, 2.0, 4.0], &[Msi, Msi, Mss, Mss, Mss]).unwrap();
        assert!((a - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auc_from_scores(&[0.1, 0.2], &[Mss, Mss]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(auc_from_scores(&[0.1], &[Mss, Msi]).is_err());
    }

    #[test]
    fn roc_endpoints() {
        let pts = roc_curve(&[0.9, 0.4, 0.4, 0.1], &[Msi, Mss, Msi, Mss]).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }
}
