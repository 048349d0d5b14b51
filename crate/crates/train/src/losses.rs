//! Loss terms of the joint objective.
//!
//! Tensors use the `(N, C, H, W)` layout. Flow targets carry
//! `(flow_y, flow_x, prob)` channels; segmenter predictions carry the same
//! channels with the probability as a logit.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use cyclepose_core::filters::dilate_square;
use cyclepose_core::InstanceMask;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_cyc_img: f64,
    pub w_cyc_mask: f64,
    pub w_perlin: f64,
    pub lambda_m2i: f64,
    pub t_n: f64,
    pub t_b: f64,
    /// Side of the square dilation kernel that carves the unconstrained
    /// transition zone around nuclei.
    pub dilation_d: usize,
    /// Flow residuals are multiplied by this before squaring.
    pub flow_scale: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cyc_img: 10.0,
            w_cyc_mask: 15.0,
            w_perlin: 15.0,
            lambda_m2i: 7.5,
            t_n: 0.2,
            t_b: 0.3,
            dilation_d: 5,
            flow_scale: 5.0,
            w_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("w_cyc_img", self.w_cyc_img),
            ("w_cyc_mask", self.w_cyc_mask),
            ("w_perlin", self.w_perlin),
            ("lambda_m2i", self.lambda_m2i),
            ("flow_scale", self.flow_scale),
            ("w_adv", self.w_adv),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        for (name, t) in [("t_n", self.t_n), ("t_b", self.t_b)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// The two parts of the segmentation loss, as scalar tensors.
#[derive(Debug, Clone)]
pub struct SegLossTerms {
    pub flow_l2: Tensor,
    pub prob_ce: Tensor,
}

impl SegLossTerms {
    /// Half the flow term plus the cross-entropy.
    pub fn combined(&self) -> Result<Tensor> {
        Ok(((&self.flow_l2 * 0.5)? + &self.prob_ce)?)
    }
}

/// Binary cross-entropy with logits, elementwise and overflow-free:
/// `max(x, 0) − x·t + ln(1 + e^{−|x|})`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * target)?)? + softplus)?)
}

pub fn seg_loss(pred: &Tensor, target: &Tensor, flow_scale: f64) -> Result<SegLossTerms> {
    same_shape(pred, target, "segmentation loss")?;
    if pred.dim(1)? != 3 {
        return Err(Error::Shape(format!("segmentation loss expects 3 channels, got {}", pred.dim(1)?)));
    }
    let diff = (pred.narrow(1, 0, 2)? - target.narrow(1, 0, 2)?)?;
    let flow_l2 = (diff * flow_scale)?.sqr()?.mean_all()?;
    let prob_ce = bce_with_logits(&pred.narrow(1, 2, 1)?, &target.narrow(1, 2, 1)?)?.mean_all()?;
    Ok(SegLossTerms { flow_l2, prob_ce })
}

/// Indicator maps for the mask-to-image loss, shaped `(N, 1, H, W)`:
/// nucleus pixels and clear-background pixels (complement of the dilated
/// foreground).
#[derive(Debug, Clone)]
pub struct M2iMasks {
    pub nuclei: Tensor,
    pub background: Tensor,
}

impl M2iMasks {
    pub fn new(masks: &[InstanceMask], dilation_d: usize, device: &Device, dtype: DType) -> Result<Self> {
        let first = masks.first().ok_or_else(|| Error::Shape("no masks".into()))?;
        let (h, w) = first.dim();
        let mut nuc = Vec::with_capacity(masks.len() * h * w);
        let mut bg = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.dim() != (h, w) {
                return Err(Error::Shape("masks in a batch must share one size".into()));
            }
            let fg: Array2<bool> = m.foreground();
            let dilated = dilate_square(&fg, dilation_d);
            nuc.extend(fg.iter().map(|&v| f32::from(u8::from(v))));
            bg.extend(dilated.iter().map(|&v| f32::from(u8::from(!v))));
        }
        let shape = (masks.len(), 1, h, w);
        Ok(Self {
            nuclei: Tensor::from_vec(nuc, shape, device)?.to_dtype(dtype)?,
            background: Tensor::from_vec(bg, shape, device)?.to_dtype(dtype)?,
        })
    }
}

/// Per-image minimum and maximum of `img` as `(N, 1, 1, 1)` tensors,
/// detached: they act as normalization constants.
pub fn image_extrema(img: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = img.dim(0)?;
    let flat = img.detach().flatten_from(1)?;
    Ok((
        flat.min_keepdim(1)?.reshape((n, 1, 1, 1))?,
        flat.max_keepdim(1)?.reshape((n, 1, 1, 1))?,
    ))
}

/// Per-pixel nucleus and background penalty grids. `extrema` overrides the
/// per-image `(min, max)`.
pub fn m2i_grids(
    masks: &M2iMasks,
    fake: &Tensor,
    t_n: f64,
    t_b: f64,
    extrema: Option<&(Tensor, Tensor)>,
) -> Result<(Tensor, Tensor)> {
    same_shape(&masks.nuclei, fake, "mask-to-image loss")?;
    let (lo, hi) = match extrema {
        Some((lo, hi)) => (lo.clone(), hi.clone()),
        None => image_extrema(fake)?,
    };
    let range = (&hi - &lo)?;
    let floor = ((&range * t_n)? + &lo)?;
    let ceiling = ((&range * t_b)? + &lo)?;
    let nuclei = (floor.broadcast_sub(fake)?.relu()? * &masks.nuclei)?;
    let background = (fake.broadcast_sub(&ceiling)?.relu()? * &masks.background)?;
    Ok((nuclei, background))
}

/// `λ/|m| · Σ (nucleus + background penalties)` with `|m|` the pixel count
/// (batch included).
pub fn m2i_total(
    masks: &M2iMasks,
    fake: &Tensor,
    weights: &LossWeights,
    extrema: Option<&(Tensor, Tensor)>,
) -> Result<Tensor> {
    let (nuclei, background) = m2i_grids(masks, fake, weights.t_n, weights.t_b, extrema)?;
    Ok(((nuclei + background)?.mean_all()? * weights.lambda_m2i)?)
}

/// Least-squares adversarial loss against a constant target (1 real, 0 fake).
pub fn lsgan(scores: &Tensor, real: bool) -> Result<Tensor> {
    let target = if real { 1.0 } else { 0.0 };
    Ok(scores.affine(1.0, -target)?.sqr()?.mean_all()?)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "L1 loss")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One optimisation step's loss components. Disabled terms are `None`.
/// `adv_g`/`adv_s` are the adversarial terms of the generator (judged by the
/// image discriminator) and the segmenter (judged by the flow
/// discriminator); `cyc_g` is the image cycle, `cyc_s` the mask cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub adv_g: Option<f64>,
    pub adv_s: Option<f64>,
    pub cyc_g: Option<f64>,
    pub cyc_s: Option<f64>,
    pub perlin: Option<f64>,
    pub m2i: Option<f64>,
    pub total: f64,
    pub d_img: Option<f64>,
    pub d_seg: Option<f64>,
}

impl LossRecord {
    /// Generator/segmenter terms that are present, by name.
    pub fn components(&self) -> Vec<(&'static str, f64)> {
        [
            ("adv_g", self.adv_g),
            ("adv_s", self.adv_s),
            ("cyc_g", self.cyc_g),
            ("cyc_s", self.cyc_s),
            ("perlin", self.perlin),
            ("m2i", self.m2i),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    pub fn component_sum(&self) -> f64 {
        self.components().iter().map(|(_, v)| v).sum()
    }

    /// First non-finite value, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        let all = self
            .components()
            .into_iter()
            .chain([("total", Some(self.total)), ("d_img", self.d_img), ("d_seg", self.d_seg)]
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k, v))));
        all.into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }
}

pub fn write_records_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Append records as JSON lines.
pub fn append_records_jsonl(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
