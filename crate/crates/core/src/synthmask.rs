//! Synthetic instance masks: randomly placed ellipses with bounded pairwise
//! overlap, followed by a smooth random elastic warp.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::spline_upsample;
use crate::mask::InstanceMask;
use crate::rng::rng_for;

/// Placement attempts per ellipse before it is skipped.
pub const PLACEMENT_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EllipseConfig {
    /// Full major-axis length in pixels.
    pub major_axis_range: (u32, u32),
    pub eccentricity_range: (f64, f64),
    /// Allowed intersection relative to the smaller of two ellipses.
    pub max_overlap_fraction: f64,
    pub count_range: (u32, u32),
    /// `(height, width)`.
    pub canvas_size: (usize, usize),
}

impl Default for EllipseConfig {
    fn default() -> Self {
        Self {
            major_axis_range: (5, 30),
            eccentricity_range: (0.6, 0.9),
            max_overlap_fraction: 0.10,
            count_range: (8, 40),
            canvas_size: (224, 224),
        }
    }
}

impl EllipseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("ellipse: {m}")));
        let (h, w) = self.canvas_size;
        let (lo, hi) = self.major_axis_range;
        if h == 0 || w == 0 {
            return bad("empty canvas");
        }
        if lo < 1 || lo > hi || hi as usize >= h.min(w) {
            return bad("major_axis_range must satisfy 1 <= low <= high < min(canvas)");
        }
        let (elo, ehi) = self.eccentricity_range;
        if !(0.0..1.0).contains(&elo) || !(0.0..1.0).contains(&ehi) || elo > ehi {
            return bad("eccentricity_range must lie in [0, 1) with low <= high");
        }
        if !(0.0..=1.0).contains(&self.max_overlap_fraction) {
            return bad("max_overlap_fraction must lie in [0, 1]");
        }
        if self.count_range.0 > self.count_range.1 {
            return bad("count_range low > high");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    /// Side length `d` of the coarse displacement grid.
    pub grid_size_range: (usize, usize),
    /// Per-component displacement variance σ² in px².
    pub variance_range: (f64, f64),
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            grid_size_range: (5, 15),
            variance_range: (1.0, 5.0),
        }
    }
}

impl DeformConfig {
    pub fn validate(&self, canvas: (usize, usize)) -> Result<()> {
        let (lo, hi) = self.grid_size_range;
        if lo < 2 || lo > hi || hi > canvas.0.min(canvas.1) {
            return Err(Error::InvalidConfig(
                "deform: grid_size_range must lie in [2, canvas side] with low <= high".into(),
            ));
        }
        let (vlo, vhi) = self.variance_range;
        if !(vlo > 0.0) || vlo > vhi {
            return Err(Error::InvalidConfig(
                "deform: variance_range must be positive with low <= high".into(),
            ));
        }
        Ok(())
    }
}

/// A rotated ellipse in pixel coordinates. A pixel belongs to it when the
/// pixel center satisfies the implicit equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center_y: f64,
    pub center_x: f64,
    /// Semi-major axis.
    pub a: f64,
    /// Semi-minor axis.
    pub b: f64,
    /// Orientation of the major axis, radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn from_axis_and_eccentricity(
        center_y: f64,
        center_x: f64,
        major_axis: f64,
        eccentricity: f64,
        angle: f64,
    ) -> Self {
        let a = major_axis / 2.0;
        Self {
            center_y,
            center_x,
            a,
            b: a * (1.0 - eccentricity * eccentricity).sqrt(),
            angle,
        }
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.center_y;
        let dx = x - self.center_x;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }

    /// Canvas pixels covered by the ellipse, row-major.
    pub fn pixels(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let r = self.a.ceil() + 1.0;
        let y0 = (self.center_y - r).floor().max(0.0) as usize;
        let x0 = (self.center_x - r).floor().max(0.0) as usize;
        let y1 = ((self.center_y + r).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        let x1 = ((self.center_x + r).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.contains(y as f64, x as f64) {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Overlap acceptance rule: the candidate's pixel set may share at most
/// `max_fraction × min(area_i, area_candidate)` pixels with every placed
/// ellipse `i` (areas are rasterized pixel counts).
pub fn placement_allowed(
    placed: &[(Ellipse, usize)],
    candidate: &[(usize, usize)],
    max_fraction: f64,
) -> bool {
    placed.iter().all(|(e, area)| {
        let shared = candidate
            .iter()
            .filter(|&&(y, x)| e.contains(y as f64, x as f64))
            .count();
        shared as f64 <= max_fraction * (*area).min(candidate.len()) as f64
    })
}

/// Sample ellipses under the overlap rule. Returns the accepted ellipses with
/// their rasterized areas, in placement order.
pub fn sample_ellipses(cfg: &EllipseConfig, seed: u64) -> Result<Vec<(Ellipse, usize)>> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0xE11);
    let (h, w) = cfg.canvas_size;
    let count = rng.random_range(cfg.count_range.0..=cfg.count_range.1);
    let mut placed: Vec<(Ellipse, usize)> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let major =
                rng.random_range(cfg.major_axis_range.0 as f64..=cfg.major_axis_range.1 as f64);
            let ecc = rng.random_range(cfg.eccentricity_range.0..=cfg.eccentricity_range.1);
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let angle = rng.random_range(0.0..PI);
            let e = Ellipse::from_axis_and_eccentricity(cy, cx, major, ecc, angle);
            let px = e.pixels(h, w);
            if px.is_empty() {
                continue;
            }
            if placement_allowed(&placed, &px, cfg.max_overlap_fraction) {
                placed.push((e, px.len()));
                break;
            }
        }
    }
    Ok(placed)
}

/// Rasterize ellipses in order; later ellipses own shared pixels. The result
/// is compacted so instances that lost all pixels vanish.
pub fn rasterize(ellipses: &[Ellipse], height: usize, width: usize) -> InstanceMask {
    let mut labels = Array2::<u32>::zeros((height, width));
    for (i, e) in ellipses.iter().enumerate() {
        for (y, x) in e.pixels(height, width) {
            labels[[y, x]] = i as u32 + 1;
        }
    }
    InstanceMask::new(labels).compact()
}

pub fn sample_ellipse_mask(cfg: &EllipseConfig, seed: u64) -> Result<InstanceMask> {
    let placed = sample_ellipses(cfg, seed)?;
    let ellipses: Vec<Ellipse> = placed.into_iter().map(|(e, _)| e).collect();
    Ok(rasterize(&ellipses, cfg.canvas_size.0, cfg.canvas_size.1))
}

/// Coarse `d × d` displacement grid per axis, i.i.d. N(0, σ²).
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseField {
    pub dy: Array2<f64>,
    pub dx: Array2<f64>,
}

impl CoarseField {
    pub fn zeros(d: usize) -> Self {
        Self {
            dy: Array2::zeros((d, d)),
            dx: Array2::zeros((d, d)),
        }
    }

    pub fn sample<R: Rng>(d: usize, variance: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, variance.sqrt()).expect("variance is positive");
        let dy = Array2::from_shape_simple_fn((d, d), || normal.sample(rng));
        let dx = Array2::from_shape_simple_fn((d, d), || normal.sample(rng));
        Self { dy, dx }
    }
}

/// Draw the coarse field `elastic_deform` would use for this `(cfg, seed)`.
pub fn sample_coarse_field(cfg: &DeformConfig, seed: u64) -> CoarseField {
    let mut rng = rng_for(seed, 0xDEF);
    let d = rng.random_range(cfg.grid_size_range.0..=cfg.grid_size_range.1);
    let var = rng.random_range(cfg.variance_range.0..=cfg.variance_range.1);
    CoarseField::sample(d, var, &mut rng)
}

/// Warp labels by nearest-neighbor backward mapping through the spline-upsampled
/// field. Samples outside the canvas become background.
pub fn warp_labels(mask: &InstanceMask, field: &CoarseField) -> InstanceMask {
    let (h, w) = mask.dim();
    let dy = spline_upsample(&field.dy, h, w);
    let dx = spline_upsample(&field.dx, h, w);
    let src = mask.labels();
    let out = Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (y as f64 + dy[[y, x]]).round();
        let sx = (x as f64 + dx[[y, x]]).round();
        if sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
            0
        } else {
            src[[sy as usize, sx as usize]]
        }
    });
    InstanceMask::new(out)
}

pub fn elastic_deform(mask: &InstanceMask, cfg: &DeformConfig, seed: u64) -> Result<InstanceMask> {
    cfg.validate(mask.dim())?;
    Ok(warp_labels(mask, &sample_coarse_field(cfg, seed)))
}

/// Ellipse sampling followed by elastic deformation, compacted.
pub fn synthesize_mask(
    ellipse: &EllipseConfig,
    deform: &DeformConfig,
    seed: u64,
) -> Result<InstanceMask> {
    let m = sample_ellipse_mask(ellipse, seed)?;
    Ok(elastic_deform(&m, deform, seed)?.compact())
}
