//! ROC curves over same/different pair scores.

use crate::{Error, Result};

/// `(fpr, tpr)` points from `(0, 0)` to `(1, 1)` and the area under them.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Higher scores mean "same". Ties between classes contribute half, which is
/// what the trapezoid through tied thresholds gives.
pub fn roc_curve(same: &[f64], different: &[f64]) -> Result<RocCurve> {
    if same.is_empty() || different.is_empty() {
        return Err(Error::Eval(format!(
            "degenerate ROC: need both same and different pairs, got {} and {}",
            same.len(),
            different.len()
        )));
    }
    if same.iter().chain(different).any(|s| !s.is_finite()) {
        return Err(Error::Eval("non-finite pair score".into()));
    }
    let mut all: Vec<(f64, bool)> = same.iter().map(|&s| (s, true)).chain(different.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (same.len() as f64, different.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let p = (fp as f64 / nn, tp as f64 / np);
        let q = points.last().copied().expect("starts with origin");
        auc += (p.0 - q.0) * (p.1 + q.1) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// `P(same > different) + ½ P(tie)` over every pair of scores.
pub fn auc_pair_count(same: &[f64], different: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &s in same {
        for &d in different {
            wins += if s > d {
                1.0
            } else if s == d {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (same.len() * different.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_scores_give_unit_auc() {
        let r = roc_curve(&[0.9, 0.8], &[0.4, 0.6]).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn overlap_matches_pair_counting() {
        let (s, d) = ([0.9, 0.5], [0.4, 0.6]);
        let r = roc_curve(&s, &d).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(auc_pair_count(&s, &d), 0.75);
        let (s, d) = ([0.5, 0.5, 0.7], [0.5, 0.1]);
        assert!((roc_curve(&s, &d).unwrap().auc - auc_pair_count(&s, &d)).abs() < 1e-12);
    }

    #[test]
    fn one_class_is_rejected() {
        assert!(roc_curve(&[0.1, 0.2], &[]).unwrap_err().to_string().contains("degenerate"));
        assert!(roc_curve(&[], &[0.3]).is_err());
    }
}
