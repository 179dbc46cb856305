//! ROC construction and the summary statistics read from it.
//!
//! An operating point at threshold `t` predicts positive when `score >= t`.
//! Points are stored in ascending threshold order, from the `-inf` sentinel
//! (everything positive) to the `+inf` sentinel (nothing positive). Equal scores
//! cross a threshold together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub n_positive: usize,
    pub n_negative: usize,
    pub points: Vec<RocPoint>,
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::InvalidArgument("labels contain no positive examples".into()));
    }
    if n_neg == 0 {
        return Err(Error::InvalidArgument("labels contain no negative examples".into()));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    // descending score: walking the list lowers the threshold
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let point = |threshold: f64, tp: usize, fp: usize| RocPoint {
        threshold,
        true_positives: tp,
        false_positives: fp,
        sensitivity: tp as f64 / n_pos as f64,
        specificity: (n_neg - fp) as f64 / n_neg as f64,
    };
    let mut desc = vec![point(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // the lowest score coincides with the -inf sentinel
        if i < pairs.len() {
            desc.push(point(s, tp, fp));
        }
    }
    desc.push(point(f64::NEG_INFINITY, n_pos, n_neg));
    desc.reverse();
    Ok(RocCurve {
        n_positive: n_pos,
        n_negative: n_neg,
        points: desc,
    })
}

/// Trapezoidal area in `(1 - specificity, sensitivity)`; equals the pairwise
/// concordance statistic with ties counted one half.
pub fn auroc(curve: &RocCurve) -> f64 {
    // twice the area, in units of one positive-negative pair
    let mut doubled: u128 = 0;
    for w in curve.points.windows(2) {
        let dfp = (w[0].false_positives - w[1].false_positives) as u128;
        doubled += dfp * (w[0].true_positives + w[1].true_positives) as u128;
    }
    doubled as f64 / (2.0 * curve.n_positive as f64 * curve.n_negative as f64)
}

/// Integral of specificity over the sensitivity band `[lo, hi]` along the
/// piecewise-linear curve, divided by the band width.
pub fn pauc_ratio(curve: &RocCurve, lo: f64, hi: f64) -> f64 {
    assert!(lo < hi, "empty sensitivity band");
    let mut area = 0.0;
    for w in curve.points.windows(2) {
        // ascending threshold: sensitivity falls from a to b
        let (sa, pa) = (w[0].sensitivity, w[0].specificity);
        let (sb, pb) = (w[1].sensitivity, w[1].specificity);
        if sa == sb {
            continue;
        }
        let (s0, s1) = (sb.max(lo), sa.min(hi));
        if s1 <= s0 {
            continue;
        }
        let at = |s: f64| pb + (pa - pb) * (s - sb) / (sa - sb);
        area += 0.5 * (at(s0) + at(s1)) * (s1 - s0);
    }
    area / (hi - lo)
}

/// Specificity at `target` sensitivity: the best specificity among operating
/// points with exactly that sensitivity, otherwise linear interpolation between
/// the neighbouring operating points.
pub fn specificity_at_sensitivity(curve: &RocCurve, target: f64) -> f64 {
    let exact = curve
        .points
        .iter()
        .filter(|p| p.sensitivity == target)
        .map(|p| p.specificity)
        .fold(f64::NEG_INFINITY, f64::max);
    if exact.is_finite() {
        return exact;
    }
    for w in curve.points.windows(2) {
        let (sa, pa) = (w[0].sensitivity, w[0].specificity);
        let (sb, pb) = (w[1].sensitivity, w[1].specificity);
        if sa > target && target > sb {
            return pb + (pa - pb) * (target - sb) / (sa - sb);
        }
    }
    // target outside [0, 1]
    if target > 1.0 {
        0.0
    } else {
        1.0
    }
}

/// Highest threshold whose sensitivity reaches `target`.
pub fn threshold_at_sensitivity(curve: &RocCurve, target: f64) -> f64 {
    curve
        .points
        .iter()
        .rev()
        .find(|p| p.sensitivity >= target)
        .map_or(f64::NEG_INFINITY, |p| p.threshold)
}

/// CSV with columns `threshold,x,y` where `x = 1 - specificity`, `y = sensitivity`.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,x,y\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, 1.0 - p.specificity, p.sensitivity));
    }
    out
}
