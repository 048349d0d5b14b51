//! Geometric augmentation: random rotation, scale and translation about the
//! image center, followed by a center crop. Images are resampled bilinearly,
//! masks by nearest neighbor so labels stay integral.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{InstanceMask, IntensityImage};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_deg: (f64, f64),
    pub scale_range: (f64, f64),
    /// Maximum absolute shift per axis, pixels.
    pub translation_px: f64,
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: (-180.0, 180.0),
            scale_range: (0.8, 1.2),
            translation_px: 20.0,
            crop: 224,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, dim: (usize, usize)) -> Result<()> {
        if self.crop == 0 || self.crop > dim.0.min(dim.1) {
            return Err(Error::InvalidConfig(format!(
                "augment: crop {} exceeds image side {}",
                self.crop,
                dim.0.min(dim.1)
            )));
        }
        if self.rotation_deg.0 > self.rotation_deg.1
            || !(self.scale_range.0 > 0.0)
            || self.scale_range.0 > self.scale_range.1
            || self.translation_px < 0.0
        {
            return Err(Error::InvalidConfig("augment: malformed ranges".into()));
        }
        Ok(())
    }
}

/// One concrete similarity transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub scale: f64,
    pub shift_y: f64,
    pub shift_x: f64,
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        angle_deg: 0.0,
        scale: 1.0,
        shift_y: 0.0,
        shift_x: 0.0,
    };

    pub fn sample(cfg: &AugmentConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0xA06);
        let t = cfg.translation_px;
        Self {
            angle_deg: rng.random_range(cfg.rotation_deg.0..=cfg.rotation_deg.1),
            scale: rng.random_range(cfg.scale_range.0..=cfg.scale_range.1),
            shift_y: rng.random_range(-t..=t),
            shift_x: rng.random_range(-t..=t),
        }
    }

    /// Source coordinate for output pixel `(y, x)` of a `crop × crop` window
    /// centered on the transformed input.
    fn source(&self, y: usize, x: usize, crop: usize, dim: (usize, usize)) -> (f64, f64) {
        let c_out = (crop as f64 - 1.0) / 2.0;
        let (cy, cx) = ((dim.0 as f64 - 1.0) / 2.0, (dim.1 as f64 - 1.0) / 2.0);
        let qy = (y as f64 - c_out - self.shift_y) / self.scale;
        let qx = (x as f64 - c_out - self.shift_x) / self.scale;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        // Inverse rotation.
        (cy + c * qy - s * qx, cx + s * qy + c * qx)
    }
}

fn sample_bilinear(img: &IntensityImage, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

pub fn warp_image(img: &IntensityImage, params: &AffineParams, crop: usize) -> IntensityImage {
    Array2::from_shape_fn((crop, crop), |(y, x)| {
        let (sy, sx) = params.source(y, x, crop, img.dim());
        sample_bilinear(img, sy, sx)
    })
}

pub fn warp_mask(mask: &InstanceMask, params: &AffineParams, crop: usize) -> InstanceMask {
    let (h, w) = mask.dim();
    let labels = mask.labels();
    InstanceMask::new(Array2::from_shape_fn((crop, crop), |(y, x)| {
        let (sy, sx) = params.source(y, x, crop, (h, w));
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
            0
        } else {
            labels[[ry as usize, rx as usize]]
        }
    }))
}

/// Same random transform for the image and, when given, its mask.
pub fn augment(
    image: &IntensityImage,
    mask: Option<&InstanceMask>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(IntensityImage, Option<InstanceMask>)> {
    cfg.validate(image.dim())?;
    if let Some(m) = mask {
        if m.dim() != image.dim() {
            return Err(Error::Shape(format!("image {:?} vs mask {:?}", image.dim(), m.dim())));
        }
    }
    let params = AffineParams::sample(cfg, seed);
    Ok((
        warp_image(image, &params, cfg.crop),
        mask.map(|m| warp_mask(m, &params, cfg.crop)),
    ))
}

/// Element `k ∈ 0..8` of the dihedral group: `k % 4` quarter turns
/// counter-clockwise, then a horizontal flip when `k >= 4`.
pub fn dihedral<T: Clone>(a: &Array2<T>, k: usize) -> Array2<T> {
    let mut out = a.clone();
    for _ in 0..k % 4 {
        let (h, w) = out.dim();
        out = Array2::from_shape_fn((w, h), |(y, x)| out[[x, w - 1 - y]].clone());
    }
    if k >= 4 {
        let (h, w) = out.dim();
        out = Array2::from_shape_fn((h, w), |(y, x)| out[[y, w - 1 - x]].clone());
    }
    out
}
