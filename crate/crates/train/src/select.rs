//! Checkpoint selection on a small annotated validation subset, expanded
//! by the eight rotations/flips of the square.

use std::fs;
use std::path::{Path, PathBuf};

use cyclepose_core::augment::dihedral;
use cyclepose_core::metrics::{jaccard_sweep, Aggregation, SweepResult};
use cyclepose_core::{InstanceMask, IntensityImage};
use serde::Serialize;

use crate::error::{Error, Result};

/// Anything that turns a normalized `[0, 1]` image into an instance mask.
pub trait InstanceSegmenter {
    fn segment(&self, image: &IntensityImage) -> Result<InstanceMask>;
}

impl<S: InstanceSegmenter + ?Sized> InstanceSegmenter for &S {
    fn segment(&self, image: &IntensityImage) -> Result<InstanceMask> {
        (**self).segment(image)
    }
}

impl<S: InstanceSegmenter + ?Sized> InstanceSegmenter for Box<S> {
    fn segment(&self, image: &IntensityImage) -> Result<InstanceMask> {
        (**self).segment(image)
    }
}

/// All eight dihedral variants of every pair.
pub fn dihedral_expand(pairs: &[(IntensityImage, InstanceMask)]) -> Vec<(IntensityImage, InstanceMask)> {
    pairs
        .iter()
        .flat_map(|(img, mask)| {
            (0..8).map(move |k| (dihedral(img, k), InstanceMask::new(dihedral(mask.labels(), k))))
        })
        .collect()
}

/// Segment every image and compute the threshold sweep against its mask.
pub fn evaluate<S: InstanceSegmenter + ?Sized>(
    segmenter: &S,
    pairs: &[(IntensityImage, InstanceMask)],
    aggregation: Aggregation,
) -> Result<SweepResult> {
    let predictions = pairs
        .iter()
        .map(|(img, gt)| Ok((segmenter.segment(img)?, gt.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(jaccard_sweep(&predictions, aggregation)?)
}

pub struct Candidate<S> {
    pub label: String,
    pub epoch: usize,
    pub segmenter: S,
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateScore {
    pub label: String,
    pub epoch: usize,
    pub jac_mean: f64,
    pub jac_50: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Selection {
    pub best: usize,
    pub evaluated_pairs: usize,
    pub scores: Vec<CandidateScore>,
}

/// Pick the candidate with the highest mean Jaccard over thresholds
/// 0.5:0.05:0.95 on the dihedrally expanded subset; ties go to the later
/// epoch.
pub fn select_model<S: InstanceSegmenter>(
    candidates: &[Candidate<S>],
    val: &[(IntensityImage, InstanceMask)],
) -> Result<Selection> {
    if val.is_empty() {
        return Err(Error::Select("the validation subset is empty".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Select("no candidates to select from".into()));
    }
    let expanded = dihedral_expand(val);
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        let sweep = evaluate(&c.segmenter, &expanded, Aggregation::default())?;
        log::info!("{}: JAC 0.5:0.95 = {:.4}", c.label, sweep.jac_mean);
        scores.push(CandidateScore {
            label: c.label.clone(),
            epoch: c.epoch,
            jac_mean: sweep.jac_mean,
            jac_50: sweep.jac_50,
        });
        let (b, s) = (&scores[best], &scores[i]);
        if i > 0 && (s.jac_mean > b.jac_mean || (s.jac_mean == b.jac_mean && s.epoch >= b.epoch)) {
            best = i;
        }
    }
    Ok(Selection { best, evaluated_pairs: expanded.len(), scores })
}

/// Checkpoint directories of a run, oldest first.
pub fn checkpoint_dirs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let root = run_dir.join("checkpoints");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::Select(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("step_"))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}
