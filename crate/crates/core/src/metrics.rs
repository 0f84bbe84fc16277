//! Rank AUC and inverse-frequency class weights.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_labels(labels: &[u8]) -> Result<(usize, usize)> {
    let mut pos = 0;
    for &y in labels {
        match y {
            0 => {}
            1 => pos += 1,
            other => return Err(Error::Label(other)),
        }
    }
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve via the Mann-Whitney statistic, with tied
/// scores sharing their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(alloc::format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (n_pos, n_neg) = check_labels(labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += mid_rank * positives as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-class loss weights `N / (2 N_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_pos: f64,
    pub w_neg: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        w_pos: 1.0,
        w_neg: 1.0,
    };

    pub fn for_label(&self, label: u8) -> f64 {
        if label == 1 {
            self.w_pos
        } else {
            self.w_neg
        }
    }

    pub fn from_counts(n_pos: usize, n_neg: usize) -> Result<Self> {
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::DegenerateWeights);
        }
        let total = (n_pos + n_neg) as f64;
        Ok(ClassWeights {
            w_pos: total / (2.0 * n_pos as f64),
            w_neg: total / (2.0 * n_neg as f64),
        })
    }
}

pub fn class_weights(labels: &[u8]) -> Result<ClassWeights> {
    let (pos, neg) = check_labels(labels)?;
    ClassWeights::from_counts(pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let a = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
    }

    #[test]
    fn separated_and_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc));
        assert_eq!(class_weights(&[0, 0, 0]), Err(Error::DegenerateWeights));
    }

    #[test]
    fn non_binary_label_rejected() {
        assert_eq!(auc(&[0.1, 0.2], &[0, 2]), Err(Error::Label(2)));
    }

    #[test]
    fn full_dataset_counts_balance() {
        let w = ClassWeights::from_counts(1104, 266).unwrap();
        assert!((w.w_pos - 1370.0 / 2208.0).abs() < 1e-12);
        assert!((w.w_neg - 1370.0 / 532.0).abs() < 1e-12);
        assert!((w.w_pos - 0.6204).abs() < 1e-4 && (w.w_neg - 2.5752).abs() < 1e-4);
        let acl = ClassWeights::from_counts(319, 1051).unwrap();
        assert!((acl.w_pos - 2.1473).abs() < 1e-4 && (acl.w_neg - 0.6518).abs() < 1e-4);
        let men = ClassWeights::from_counts(508, 862).unwrap();
        assert!((men.w_pos - 1.3484).abs() < 1e-4 && (men.w_neg - 0.7947).abs() < 1e-4);
    }

    #[test]
    fn balanced_labels_give_unit_weights() {
        assert_eq!(class_weights(&[0, 1, 1, 0]).unwrap(), ClassWeights::UNIT);
    }
}
