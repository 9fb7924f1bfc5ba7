//! Threshold-free detection metrics. Higher confidence means "more
//! in-distribution". No curve interpolation: every curve is a step function
//! over the distinct observed confidences, with inclusive thresholds.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{MclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub confidence: f64,
    pub is_ind: bool,
}

impl ScoredSample {
    pub fn ind(confidence: f64) -> Self {
        Self {
            confidence,
            is_ind: true,
        }
    }

    pub fn ood(confidence: f64) -> Self {
        Self {
            confidence,
            is_ind: false,
        }
    }
}

/// Which class is treated as positive for the precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positive {
    Ind,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub fpr_at_95: f64,
    pub aupr_ind: f64,
    pub aupr_ood: f64,
    pub n_ind: usize,
    pub n_ood: usize,
}

impl MetricReport {
    pub fn compute(samples: &[ScoredSample]) -> Result<Self> {
        let (n_ind, n_ood) = counts(samples)?;
        Ok(Self {
            auroc: auroc(samples)?,
            fpr_at_95: fpr_at_tpr(samples, 0.95)?,
            aupr_ind: aupr(samples, Positive::Ind)?,
            aupr_ood: aupr(samples, Positive::Ood)?,
            n_ind,
            n_ood,
        })
    }
}

fn counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(bad) = samples.iter().find(|s| !s.confidence.is_finite()) {
        return Err(MclError::NonFinite(format!("confidence {}", bad.confidence)));
    }
    let n_ind = samples.iter().filter(|s| s.is_ind).count();
    let n_ood = samples.len() - n_ind;
    if n_ind == 0 || n_ood == 0 {
        return Err(MclError::SingleClass);
    }
    Ok((n_ind, n_ood))
}

/// Groups of tied confidences in descending order: `(confidence, n_ind, n_ood)`.
fn descending_groups(samples: &[ScoredSample]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for s in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == s.confidence => {
                if s.is_ind {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s.confidence, s.is_ind as usize, (!s.is_ind) as usize)),
        }
    }
    groups
}

/// Probability that an IND sample outranks an OOD one, ties counting half.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (n_ind, n_ood) = counts(samples)?;
    // twice the (IND > OOD) count plus the tie count, in integers
    let mut doubled: u64 = 0;
    let mut ood_below = n_ood as u64;
    for (_, ind, ood) in descending_groups(samples) {
        ood_below -= ood as u64;
        doubled += ind as u64 * (2 * ood_below + ood as u64);
    }
    Ok(doubled as f64 / (2 * n_ind as u64 * n_ood as u64) as f64)
}

/// FPR at the largest threshold whose inclusive TPR reaches `tpr_target`.
pub fn fpr_at_tpr(samples: &[ScoredSample], tpr_target: f64) -> Result<f64> {
    let (n_ind, n_ood) = counts(samples)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (_, ind, ood) in descending_groups(samples) {
        tp += ind;
        fp += ood;
        if tp as f64 / n_ind as f64 >= tpr_target {
            return Ok(fp as f64 / n_ood as f64);
        }
    }
    // unreachable for targets <= 1; the lowest threshold passes everything
    Ok(1.0)
}

/// Average precision: `sum_n (R_n - R_{n-1}) P_n` over distinct thresholds.
/// IND-positive sweeps confidences downward, OOD-positive upward.
pub fn aupr(samples: &[ScoredSample], positive: Positive) -> Result<f64> {
    let (n_ind, n_ood) = counts(samples)?;
    let mut groups = descending_groups(samples);
    let n_pos = match positive {
        Positive::Ind => n_ind,
        Positive::Ood => {
            groups.reverse();
            n_ood
        }
    };
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    for (_, ind, ood) in groups {
        let (dp, dn) = match positive {
            Positive::Ind => (ind, ood),
            Positive::Ood => (ood, ind),
        };
        tp += dp;
        fp += dn;
        if dp > 0 {
            ap += (dp as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}
