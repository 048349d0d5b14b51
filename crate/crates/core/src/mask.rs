use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Grayscale image, row-major `(height, width)`.
pub type IntensityImage = Array2<f32>;

/// Integer label image: 0 is background, `k > 0` is nucleus instance `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    labels: Array2<u32>,
}

impl InstanceMask {
    pub fn new(labels: Array2<u32>) -> Self {
        Self { labels }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        Array2::from_shape_vec((height, width), data)
            .map(Self::new)
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut Array2<u32> {
        &mut self.labels
    }

    pub fn into_labels(self) -> Array2<u32> {
        self.labels
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per nonzero label.
    pub fn areas(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for &l in self.labels.iter().filter(|&&l| l != 0) {
            *out.entry(l).or_insert(0) += 1;
        }
        out
    }

    /// Number of distinct nonzero labels.
    pub fn instance_count(&self) -> usize {
        self.areas().len()
    }

    /// True when the nonzero labels are exactly `1..=K`.
    pub fn is_compact(&self) -> bool {
        let areas = self.areas();
        areas.keys().copied().eq(1..=areas.len() as u32)
    }

    /// Relabel to `1..=K` preserving the order of the original ids.
    pub fn compact(&self) -> Self {
        let remap: BTreeMap<u32, u32> = self
            .areas()
            .keys()
            .enumerate()
            .map(|(i, &l)| (l, i as u32 + 1))
            .collect();
        Self::new(self.labels.mapv(|l| if l == 0 { 0 } else { remap[&l] }))
    }

    /// Binary foreground indicator.
    pub fn foreground(&self) -> Array2<bool> {
        self.labels.mapv(|l| l != 0)
    }

    /// Pixel coordinates of every instance, keyed by label.
    pub fn instance_pixels(&self) -> BTreeMap<u32, Vec<(usize, usize)>> {
        let mut out: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
        for ((y, x), &l) in self.labels.indexed_iter() {
            if l != 0 {
                out.entry(l).or_default().push((y, x));
            }
        }
        out
    }

    /// Drop instances smaller than `min_size` pixels and relabel compactly.
    pub fn remove_small(&self, min_size: usize) -> Self {
        let areas = self.areas();
        let kept = Self::new(self.labels.mapv(|l| {
            if l != 0 && areas[&l] >= min_size {
                l
            } else {
                0
            }
        }));
        kept.compact()
    }
}

impl From<Array2<u32>> for InstanceMask {
    fn from(labels: Array2<u32>) -> Self {
        Self::new(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn compaction_closes_gaps() {
        let m = InstanceMask::new(array![[0, 7, 7], [3, 0, 9]]);
        assert!(!m.is_compact());
        let c = m.compact();
        assert_eq!(c.labels(), &array![[0, 2, 2], [1, 0, 3]]);
        assert!(c.is_compact());
    }

    #[test]
    fn remove_small_relabels() {
        let m = InstanceMask::new(array![[1, 1, 2], [1, 0, 3], [3, 3, 3]]);
        let r = m.remove_small(3);
        assert_eq!(r.labels(), &array![[1, 1, 0], [1, 0, 2], [2, 2, 2]]);
    }

    #[test]
    fn empty_mask_is_compact() {
        assert!(InstanceMask::zeros(4, 4).is_compact());
        assert_eq!(InstanceMask::zeros(4, 4).instance_count(), 0);
    }
}
