//! Instance matching at an IoU threshold, Jaccard index and panoptic quality.
//!
//! For thresholds at or above 0.5, any pair with IoU above the threshold is
//! the only such pair for both of its members, so the optimal one-to-one
//! matching is simply the set of above-threshold pairs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::InstanceMask;

/// The ten thresholds 0.50, 0.55, …, 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub tau: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub matched_ious: Vec<f64>,
}

impl MatchReport {
    pub fn empty(tau: f64) -> Self {
        Self {
            tau,
            tp: 0,
            fp: 0,
            fn_: 0,
            matched_ious: Vec::new(),
        }
    }

    /// Pool counts and matched IoUs from another report at the same threshold.
    pub fn merge(&mut self, other: &MatchReport) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.matched_ious.extend_from_slice(&other.matched_ious);
    }
}

/// Sparse pairwise overlap statistics between two label maps.
#[derive(Debug, Clone)]
pub struct Overlap {
    pub pred_areas: HashMap<u32, usize>,
    pub gt_areas: HashMap<u32, usize>,
    /// `(pred, gt) → intersection`, nonzero labels only.
    pub intersections: HashMap<(u32, u32), usize>,
}

impl Overlap {
    pub fn compute(pred: &InstanceMask, gt: &InstanceMask) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let mut pred_areas = HashMap::new();
        let mut gt_areas = HashMap::new();
        let mut intersections = HashMap::new();
        for (&p, &g) in pred.labels().iter().zip(gt.labels().iter()) {
            if p != 0 {
                *pred_areas.entry(p).or_insert(0) += 1;
            }
            if g != 0 {
                *gt_areas.entry(g).or_insert(0) += 1;
            }
            if p != 0 && g != 0 {
                *intersections.entry((p, g)).or_insert(0) += 1;
            }
        }
        Ok(Self {
            pred_areas,
            gt_areas,
            intersections,
        })
    }

    pub fn iou(&self, p: u32, g: u32) -> f64 {
        let inter = self.intersections.get(&(p, g)).copied().unwrap_or(0);
        if inter == 0 {
            return 0.0;
        }
        let union = self.pred_areas[&p] + self.gt_areas[&g] - inter;
        inter as f64 / union as f64
    }

    /// Match at `tau` (strict `>`).
    pub fn report(&self, tau: f64) -> MatchReport {
        let mut matched_ious: Vec<f64> = Vec::new();
        let mut pairs: Vec<&(u32, u32)> = self.intersections.keys().collect();
        pairs.sort_unstable();
        for &(p, g) in pairs {
            let iou = self.iou(p, g);
            if iou > tau {
                matched_ious.push(iou);
            }
        }
        let tp = matched_ious.len();
        MatchReport {
            tau,
            tp,
            fp: self.pred_areas.len() - tp,
            fn_: self.gt_areas.len() - tp,
            matched_ious,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.5..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!(
            "IoU threshold {tau} outside [0.5, 1.0]"
        )));
    }
    Ok(())
}

pub fn match_instances(pred: &InstanceMask, gt: &InstanceMask, tau: f64) -> Result<MatchReport> {
    check_tau(tau)?;
    Ok(Overlap::compute(pred, gt)?.report(tau))
}

/// `TP / (TP + FP + FN)`; two empty label maps score 1.
pub fn jaccard(report: &MatchReport) -> f64 {
    let denom = report.tp + report.fp + report.fn_;
    if denom == 0 {
        1.0
    } else {
        report.tp as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub pq: f64,
    pub sq: f64,
    pub dq: f64,
}

/// `sq` = mean matched IoU (0 without matches), `dq` = F1, `pq = sq · dq`.
/// Two empty label maps score 1 on all three.
pub fn panoptic_quality(report: &MatchReport) -> PanopticQuality {
    if report.tp + report.fp + report.fn_ == 0 {
        return PanopticQuality {
            pq: 1.0,
            sq: 1.0,
            dq: 1.0,
        };
    }
    let sq = if report.tp == 0 {
        0.0
    } else {
        report.matched_ious.iter().sum::<f64>() / report.tp as f64
    };
    let dq = report.tp as f64 / (report.tp as f64 + 0.5 * report.fp as f64 + 0.5 * report.fn_ as f64);
    PanopticQuality { pq: sq * dq, sq, dq }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Sum TP/FP/FN over all images, then divide.
    #[default]
    Pooled,
    /// Average per-image scores.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub thresholds: Vec<f64>,
    pub jac: Vec<f64>,
    pub pq: Vec<f64>,
    pub jac_50: f64,
    pub jac_mean: f64,
    pub pq_50: f64,
    pub pq_mean: f64,
}

/// Jaccard and PQ over thresholds 0.5:0.05:0.95 for a dataset of pairs.
pub fn jaccard_sweep(pairs: &[(InstanceMask, InstanceMask)], aggregation: Aggregation) -> Result<SweepResult> {
    let thresholds = default_thresholds();
    let overlaps = pairs
        .iter()
        .map(|(p, g)| Overlap::compute(p, g))
        .collect::<Result<Vec<_>>>()?;
    let mut jac = Vec::with_capacity(thresholds.len());
    let mut pq = Vec::with_capacity(thresholds.len());
    for &tau in &thresholds {
        let reports: Vec<MatchReport> = overlaps.iter().map(|o| o.report(tau)).collect();
        match aggregation {
            Aggregation::Pooled => {
                let mut pooled = MatchReport::empty(tau);
                reports.iter().for_each(|r| pooled.merge(r));
                jac.push(jaccard(&pooled));
                pq.push(panoptic_quality(&pooled).pq);
            }
            Aggregation::PerImage => {
                let n = reports.len().max(1) as f64;
                jac.push(reports.iter().map(jaccard).sum::<f64>() / n);
                pq.push(reports.iter().map(|r| panoptic_quality(r).pq).sum::<f64>() / n);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SweepResult {
        jac_50: jac[0],
        jac_mean: mean(&jac),
        pq_50: pq[0],
        pq_mean: mean(&pq),
        thresholds,
        jac,
        pq,
    })
}
