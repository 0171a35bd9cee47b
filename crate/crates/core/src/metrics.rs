//! ROC curve and AUC for membership scores.
//!
//! AUC is the Mann–Whitney statistic: the fraction of (member, non-member)
//! pairs in which the member scores higher, ties counting one half.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Membership;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least one member and one non-member score")]
    SingleClass,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Membership,
}

impl ScoredSample {
    pub fn new(score: f64, label: Membership) -> Self {
        Self { score, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
            .sum()
    }

    /// CSV `threshold,fpr,tpr`, six decimals per value.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writeln!(writer, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(writer, "{:.6},{:.6},{:.6}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

fn class_counts(samples: &[ScoredSample]) -> Result<(usize, usize), MetricsError> {
    let mut pos = 0;
    for s in samples {
        if !s.score.is_finite() {
            return Err(MetricsError::NonFiniteScore(s.score));
        }
        pos += usize::from(s.label.is_member());
    }
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok((pos, neg))
}

/// Rank-sum AUC in O(n log n).
pub fn auc(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    let (pos, neg) = class_counts(samples)?;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_unstable_by(|a, b| a.score.total_cmp(&b.score));

    // Sum of 1-based mid-ranks of the members.
    let mut member_rank_sum = 0.0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && sorted[end].score == sorted[start].score {
            end += 1;
        }
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let members = sorted[start..end]
            .iter()
            .filter(|s| s.label.is_member())
            .count();
        member_rank_sum += mid_rank * members as f64;
        start = end;
    }
    let p = pos as f64;
    let u = member_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// ROC points at every distinct score, highest threshold first, bracketed
/// by a `+∞` sentinel at (0, 0) and a `−∞` sentinel at (1, 1). A sample
/// counts as predicted-member when its score is at or above the threshold.
pub fn roc_points(samples: &[ScoredSample]) -> Result<RocCurve, MetricsError> {
    let (pos, neg) = class_counts(samples)?;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_unstable_by(|a, b| b.score.total_cmp(&a.score));

    let mut points = Vec::with_capacity(sorted.len() + 2);
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].label.is_member() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    Ok(RocCurve { points })
}
