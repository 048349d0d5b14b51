//! Perlin pseudo-microscopy: lattice gradient noise, its fractal octave sum,
//! and mask-conditioned image rendering with blur and shot noise.

use std::f64::consts::{PI, SQRT_2};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{gaussian_blur, otsu_threshold};
use crate::mask::{InstanceMask, IntensityImage};
use crate::rng::{derive_seed, mix64, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerlinConfig {
    pub octaves: u32,
    /// Lattice frequency of the first octave, cycles per pixel.
    pub base_frequency: f64,
    pub persistence: f64,
    /// Per-instance base brightness, normalized units.
    pub fg_intensity_range: (f64, f64),
    pub bg_intensity_range: (f64, f64),
    /// Relative darkening of nuclei where the texture is low.
    pub fg_texture_amplitude: f64,
    /// Absolute swing of the background texture around its base level.
    pub bg_texture_amplitude: f64,
    pub blur_sigma: f64,
    /// Expected photon count at intensity 1.0; `inf` disables shot noise.
    pub poisson_scale: f64,
}

impl Default for PerlinConfig {
    fn default() -> Self {
        Self {
            octaves: 4,
            base_frequency: 1.0 / 32.0,
            persistence: 0.5,
            fg_intensity_range: (0.5, 0.9),
            bg_intensity_range: (0.05, 0.15),
            fg_texture_amplitude: 0.4,
            bg_texture_amplitude: 0.03,
            blur_sigma: 1.0,
            poisson_scale: 200.0,
        }
    }
}

impl PerlinConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("perlin: {m}")));
        if self.octaves < 1 {
            return bad("octaves must be >= 1");
        }
        if !(self.base_frequency > 0.0) {
            return bad("base_frequency must be positive");
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return bad("persistence must lie in (0, 1]");
        }
        let (flo, fhi) = self.fg_intensity_range;
        let (blo, bhi) = self.bg_intensity_range;
        if flo > fhi || blo > bhi {
            return bad("intensity ranges need low <= high");
        }
        if !(flo > 0.5 * (blo + bhi)) {
            return bad("foreground range must sit above the background midpoint");
        }
        if !(0.0..=1.0).contains(&self.fg_texture_amplitude) || self.bg_texture_amplitude < 0.0 {
            return bad("texture amplitudes out of range");
        }
        if !(self.blur_sigma >= 0.0) {
            return bad("blur_sigma must be >= 0");
        }
        if !(self.poisson_scale > 0.0) {
            return bad("poisson_scale must be > 0");
        }
        Ok(())
    }
}

fn lattice_gradient(seed: u64, iy: i64, ix: i64) -> (f64, f64) {
    let h = mix64(seed ^ mix64((iy as u64).wrapping_mul(0x9E37_79B9) ^ mix64(ix as u64)));
    let theta = (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 * PI;
    let (s, c) = theta.sin_cos();
    (s, c)
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Gradient noise at a continuous lattice coordinate. Gradients are unit
/// vectors hashed from `(seed, lattice point)`, so the field is zero on the
/// lattice. Scaled by √2 so the analytic bound is exactly ±1.
pub fn perlin_at(seed: u64, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (iy, ix) = (y0 as i64, x0 as i64);
    let corner = |dy: i64, dx: i64| {
        let (gy, gx) = lattice_gradient(seed, iy + dy, ix + dx);
        gy * (fy - dy as f64) + gx * (fx - dx as f64)
    };
    let (u, v) = (fade(fx), fade(fy));
    let top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0));
    let bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0));
    ((top + v * (bottom - top)) * SQRT_2).clamp(-1.0, 1.0)
}

/// Perlin noise sampled at pixel `(y, x)` → lattice coordinate `(y·f, x·f)`.
pub fn perlin2d(shape: (usize, usize), frequency: f64, seed: u64) -> IntensityImage {
    assert!(frequency > 0.0, "frequency must be positive");
    Array2::from_shape_fn(shape, |(y, x)| {
        perlin_at(seed, y as f64 * frequency, x as f64 * frequency) as f32
    })
}

/// Unnormalized octave sum `Σ persistence^o · perlin2d(f·2^o)`.
pub fn octave_sum(shape: (usize, usize), cfg: &PerlinConfig, seed: u64) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros(shape);
    for o in 0..cfg.octaves {
        let amp = cfg.persistence.powi(o as i32);
        let freq = cfg.base_frequency * 2f64.powi(o as i32);
        let oseed = derive_seed(seed, o as u64);
        for ((y, x), v) in acc.indexed_iter_mut() {
            *v += amp * perlin_at(oseed, y as f64 * freq, x as f64 * freq);
        }
    }
    acc
}

/// Fractal Perlin texture min-max normalized to `[0, 1]`. A constant sum maps
/// to zeros.
pub fn fractal_perlin(shape: (usize, usize), cfg: &PerlinConfig, seed: u64) -> Result<IntensityImage> {
    cfg.validate()?;
    let acc = octave_sum(shape, cfg, seed);
    let (lo, hi) = acc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    Ok(acc.mapv(|v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 }))
}

/// One shot-noise draw: `Poisson(value · scale) / scale`. Infinite scale is the
/// noiseless limit.
pub fn poisson_sample<R: Rng>(value: f64, scale: f64, rng: &mut R) -> f64 {
    if scale.is_infinite() {
        return value;
    }
    let lambda = value.max(0.0) * scale;
    if lambda <= 0.0 {
        return 0.0;
    }
    let p = Poisson::new(lambda).expect("lambda is positive and finite");
    p.sample(rng) / scale
}

/// Render a pseudo-microscopy image for `mask`: textured per-instance nuclei
/// over a faintly textured background, blurred, shot-noised and clipped to
/// `[0, 1]`.
pub fn render_perlin_image(
    mask: &InstanceMask,
    cfg: &PerlinConfig,
    seed: u64,
) -> Result<IntensityImage> {
    cfg.validate()?;
    let shape = mask.dim();
    let mut rng = rng_for(seed, 0x9E41);
    let fg_tex = fractal_perlin(shape, cfg, derive_seed(seed, 1))?;
    let bg_tex = fractal_perlin(shape, cfg, derive_seed(seed, 2))?;
    let bg_base = rng.random_range(cfg.bg_intensity_range.0..=cfg.bg_intensity_range.1);
    let n = mask.max_label() as usize;
    let fg_base: Vec<f64> = (0..=n)
        .map(|_| rng.random_range(cfg.fg_intensity_range.0..=cfg.fg_intensity_range.1))
        .collect();

    let labels = mask.labels();
    let mut img = Array2::from_shape_fn(shape, |(y, x)| {
        let l = labels[[y, x]] as usize;
        if l == 0 {
            bg_base + cfg.bg_texture_amplitude * (2.0 * bg_tex[[y, x]] as f64 - 1.0)
        } else {
            fg_base[l] * (1.0 - cfg.fg_texture_amplitude * (1.0 - fg_tex[[y, x]] as f64))
        }
        .clamp(0.0, 1.0) as f32
    });
    img = gaussian_blur(&img, cfg.blur_sigma);
    img.mapv_inplace(|v| poisson_sample(v as f64, cfg.poisson_scale, &mut rng).clamp(0.0, 1.0) as f32);
    Ok(img)
}

/// Estimate foreground/background intensity ranges from unlabeled images that
/// are already normalized to `[0, 1]`: each image is split at its Otsu
/// threshold, the per-image medians of both sides are collected, and the
/// 10th–90th percentiles of those medians become the ranges.
pub fn fit_intensity_ranges(images: &[IntensityImage]) -> Result<((f64, f64), (f64, f64))> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("no images to fit intensity ranges".into()));
    }
    let median = |mut v: Vec<f32>| -> Option<f64> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f32::total_cmp);
        Some(v[v.len() / 2] as f64)
    };
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for img in images {
        let t = otsu_threshold(img);
        let (hi, lo): (Vec<f32>, Vec<f32>) = img.iter().partition(|&&v| v > t);
        if let (Some(f), Some(b)) = (median(hi), median(lo)) {
            fg.push(f);
            bg.push(b);
        }
    }
    if fg.is_empty() {
        return Err(Error::InvalidConfig("images carry no contrast".into()));
    }
    let band = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        (q(0.1), q(0.9))
    };
    Ok((band(fg), band(bg)))
}
