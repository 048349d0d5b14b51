//! Dataset manifests and ingestion.
//!
//! A manifest names an image folder, an optional mask folder and three split
//! lists. Ingestion checks every referenced file, hashes it, caches the
//! per-image normalization percentiles, and validates masks of the evaluation
//! splits. Masks of the training split are never read: training is
//! annotation-free.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{file_hash, list_images, read_gray_image, read_mask};
use crate::mask::{InstanceMask, IntensityImage};
use crate::normalize::{percentile, rescale};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitList {
    /// Inline file names (stems or names with extension).
    Inline(Vec<String>),
    /// A text file with one name per line.
    File(PathBuf),
}

impl Default for SplitList {
    fn default() -> Self {
        SplitList::Inline(Vec::new())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Splits {
    pub train: SplitList,
    pub val: SplitList,
    pub test: SplitList,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Percentiles {
    pub low: f64,
    pub high: f64,
}

impl Default for Percentiles {
    fn default() -> Self {
        Self { low: 1.0, high: 99.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Base for relative paths; defaults to the manifest's directory.
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub image_dir: PathBuf,
    #[serde(default)]
    pub mask_dir: Option<PathBuf>,
    #[serde(default)]
    pub splits: Splits,
    #[serde(default)]
    pub normalization: Percentiles,
    /// Accept color inputs by averaging channels.
    #[serde(default)]
    pub convert_rgb: bool,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::file(path, e))?;
        if m.root.is_none() {
            m.root = path.parent().map(Path::to_path_buf);
        }
        Ok(m)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn split_names(&self, split: Split) -> Result<Vec<String>> {
        let list = match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        };
        match list {
            SplitList::Inline(v) => Ok(v.clone()),
            SplitList::File(p) => {
                let p = self.resolve(p);
                let text = std::fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
                Ok(text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(String::from)
                    .collect())
            }
        }
    }
}

fn stem_of(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name)
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
    /// Set for evaluation splits only.
    pub mask: Option<PathBuf>,
    pub sha256: String,
    pub p_low: f32,
    pub p_high: f32,
}

/// Validated dataset index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub convert_rgb: bool,
    pub entries: Vec<Entry>,
}

/// Previously computed percentiles keyed by file hash.
pub type PercentileCache = HashMap<String, (f32, f32)>;

pub fn ingest(manifest: &DatasetManifest) -> Result<Dataset> {
    ingest_with_cache(manifest, &PercentileCache::new())
}

pub fn ingest_with_cache(manifest: &DatasetManifest, cache: &PercentileCache) -> Result<Dataset> {
    let image_dir = manifest.resolve(&manifest.image_dir);
    let images: HashMap<String, PathBuf> = list_images(&image_dir)?
        .into_iter()
        .map(|p| (stem_of(&p.file_name().unwrap().to_string_lossy()), p))
        .collect();
    let masks: HashMap<String, PathBuf> = match &manifest.mask_dir {
        Some(d) if manifest.resolve(d).is_dir() => list_images(&manifest.resolve(d))?
            .into_iter()
            .map(|p| (stem_of(&p.file_name().unwrap().to_string_lossy()), p))
            .collect(),
        _ => HashMap::new(),
    };

    let mut seen: HashMap<String, Split> = HashMap::new();
    let mut entries = Vec::new();
    for split in Split::ALL {
        for name in manifest.split_names(split)? {
            let id = stem_of(&name);
            if let Some(prev) = seen.insert(id.clone(), split) {
                return Err(Error::Dataset(format!(
                    "'{id}' listed in both {prev:?} and {split:?} splits"
                )));
            }
            let image = images.get(&id).cloned().ok_or_else(|| {
                Error::file(image_dir.join(&name), "listed in manifest but not found")
            })?;
            let img = read_gray_image(&image, manifest.convert_rgb)?;
            let sha256 = file_hash(&image)?;
            let (p_low, p_high) = match cache.get(&sha256) {
                Some(&v) => v,
                None => (
                    percentile(&img, manifest.normalization.low),
                    percentile(&img, manifest.normalization.high),
                ),
            };
            let mask = if split == Split::Train {
                None
            } else if let Some(mp) = masks.get(&id) {
                let m = read_mask(mp, manifest.convert_rgb)?;
                if m.dim() != img.dim() {
                    return Err(Error::file(mp, format!(
                        "mask shape {:?} differs from image shape {:?}",
                        m.dim(),
                        img.dim()
                    )));
                }
                Some(mp.clone())
            } else {
                None
            };
            entries.push(Entry {
                id,
                split,
                image,
                mask,
                sha256,
                p_low,
                p_high,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("manifest '{}' lists no images", manifest.name)));
    }
    Ok(Dataset {
        name: manifest.name.clone(),
        convert_rgb: manifest.convert_rgb,
        entries,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut out: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for e in &self.entries {
            *out.get_mut(&e.split).unwrap() += 1;
        }
        out
    }

    /// Image normalized to `[0, 1]` with its cached percentiles.
    pub fn load_image(&self, entry: &Entry) -> Result<IntensityImage> {
        let img = read_gray_image(&entry.image, self.convert_rgb)?;
        Ok(rescale(&img, entry.p_low, entry.p_high))
    }

    /// Normalized training images. Training never sees annotations.
    pub fn train_images(&self) -> Result<Vec<IntensityImage>> {
        self.split(Split::Train).map(|e| self.load_image(e)).collect()
    }

    /// Image-mask pairs of an evaluation split; the first `limit` entries
    /// when given.
    pub fn labeled_pairs(
        &self,
        split: Split,
        limit: Option<usize>,
    ) -> Result<Vec<(IntensityImage, InstanceMask)>> {
        if split == Split::Train {
            return Err(Error::Dataset(
                "annotations of the training split are not available".into(),
            ));
        }
        self.split(split)
            .take(limit.unwrap_or(usize::MAX))
            .map(|e| {
                let mp = e.mask.as_ref().ok_or_else(|| {
                    Error::Dataset(format!("no mask for evaluation image '{}'", e.id))
                })?;
                Ok((self.load_image(e)?, read_mask(mp, self.convert_rgb)?))
            })
            .collect()
    }

    pub fn percentile_cache(&self) -> PercentileCache {
        self.entries
            .iter()
            .map(|e| (e.sha256.clone(), (e.p_low, e.p_high)))
            .collect()
    }

    pub fn save_index(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("dataset index serializes");
        std::fs::write(path, json).map_err(|e| Error::file(path, e))
    }

    pub fn load_index(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::file(path, e))
    }

    /// Ids that appear in more than one split (always empty after ingestion).
    pub fn overlapping_ids(&self) -> HashSet<&str> {
        let mut seen = HashSet::new();
        let mut dup = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                dup.insert(e.id.as_str());
            }
        }
        dup
    }
}
