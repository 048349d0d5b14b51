use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use cyclepose_core::dataset::{ingest, Dataset, DatasetManifest, Split};
use cyclepose_core::metrics::{Aggregation, SweepResult};
use cyclepose_train::engine::{load_segmenter, SegmenterExport};
use cyclepose_train::nets::Segmenter;
use cyclepose_train::select::{checkpoint_dirs, evaluate, select_model, Candidate, Selection};
use cyclepose_train::{InferConfig, Predictor, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

/// Size of the annotated subset used for checkpoint selection.
pub const SELECTION_IMAGES: usize = 10;

/// Run configuration file: the dataset to train on plus training
/// settings layered over the defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    /// Dataset manifest; relative paths resolve against the run file.
    pub dataset: Option<PathBuf>,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl RunFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut run: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let (Some(d), Some(parent)) = (&run.dataset, path.parent()) {
            if d.is_relative() {
                run.dataset = Some(parent.join(d));
            }
        }
        Ok(run)
    }
}

pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let m = DatasetManifest::load(manifest)?;
    let ds = ingest(&m).with_context(|| format!("ingesting {}", manifest.display()))?;
    let sizes = ds.split_sizes();
    log::info!(
        "dataset '{}': {} train / {} val / {} test",
        m.name,
        sizes.get(&Split::Train).unwrap_or(&0),
        sizes.get(&Split::Val).unwrap_or(&0),
        sizes.get(&Split::Test).unwrap_or(&0)
    );
    Ok(ds)
}

pub fn train(cfg: TrainConfig, dataset: &Dataset, out: &Path, resume: Option<&Path>) -> Result<Trainer> {
    let images = dataset.train_images()?;
    let mut t = match resume {
        Some(ckpt) => Trainer::resume(ckpt, images, &Device::Cpu)?,
        None => Trainer::new(cfg, images, &Device::Cpu)?,
    }
    .with_run_dir(out)?;
    log::info!("training {} steps from step {}", t.total_steps(), t.step());
    t.run(None)?;
    Ok(t)
}

/// Checkpoint directories of a run directory, or of every run directly
/// below `root`.
pub fn collect_checkpoints(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("checkpoints").is_dir() {
        return Ok(checkpoint_dirs(root)?);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("checkpoints").is_dir())
        .collect();
    runs.sort();
    let mut out = Vec::new();
    for r in runs {
        out.extend(checkpoint_dirs(&r)?);
    }
    if out.is_empty() {
        bail!("no checkpoints under {}", root.display());
    }
    Ok(out)
}

pub type Model = Predictor<Segmenter>;

pub fn load_model(path: &Path, infer: &InferConfig) -> Result<(Model, SegmenterExport)> {
    let (s, meta) = load_segmenter(path, &Device::Cpu).with_context(|| format!("loading {}", path.display()))?;
    Ok((Predictor::new(s, infer.clone()), meta))
}

pub struct Selected {
    pub selection: Selection,
    pub checkpoint: PathBuf,
    pub model: Model,
}

pub fn select(checkpoints: &[PathBuf], dataset: &Dataset, infer: &InferConfig) -> Result<Selected> {
    let val = dataset.labeled_pairs(Split::Val, Some(SELECTION_IMAGES))?;
    if val.len() < SELECTION_IMAGES {
        log::warn!("validation split holds {} annotated images, fewer than {SELECTION_IMAGES}", val.len());
    }
    let mut candidates = checkpoints
        .iter()
        .map(|c| {
            let (model, meta) = load_model(c, infer)?;
            Ok(Candidate { label: c.display().to_string(), epoch: meta.epoch, segmenter: model })
        })
        .collect::<Result<Vec<_>>>()?;
    let selection = select_model(&candidates, &val)?;
    let best = candidates.swap_remove(selection.best);
    Ok(Selected { checkpoint: checkpoints[selection.best].clone(), model: best.segmenter, selection })
}

pub fn test_metrics(model: &Model, dataset: &Dataset, aggregation: Aggregation) -> Result<SweepResult> {
    let test = dataset.labeled_pairs(Split::Test, None)?;
    if test.is_empty() {
        bail!("the test split is empty");
    }
    Ok(evaluate(model, &test, aggregation)?)
}

/// Copy the segmenter files of a checkpoint into `dir`.
pub fn export_checkpoint(checkpoint: &Path, dir: &Path) -> Result<()> {
    use cyclepose_train::engine::{SEGMENTER_META, SEGMENTER_WEIGHTS};
    fs::create_dir_all(dir)?;
    for f in [SEGMENTER_WEIGHTS, SEGMENTER_META] {
        fs::copy(checkpoint.join(f), dir.join(f)).with_context(|| format!("copying {f}"))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}
