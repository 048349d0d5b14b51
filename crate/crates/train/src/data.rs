//! The training data stream: augmented real crops, synthetic masks with
//! their flow targets, and Perlin image/mask pairs. Every sample is a pure
//! function of `(seed, step, slot)`, so a resumed run sees the same data.

use candle_core::{DType, Device, Tensor};
use cyclepose_core::augment::augment;
use cyclepose_core::normalize::to_signed;
use cyclepose_core::rng::{derive_seed, rng_for};
use cyclepose_core::synthmask::synthesize_mask;
use cyclepose_core::{encode_flows, render_perlin_image, FlowTarget, InstanceMask, IntensityImage, PerlinConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};

const TAG_SHUFFLE: u64 = 0x5348;
const TAG_AUGMENT: u64 = 1;
const TAG_MASK: u64 = 2;
const TAG_PERLIN_MASK: u64 = 3;
const TAG_BLUR: u64 = 4;
const TAG_PERLIN: u64 = 5;

/// One training example, images in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub real: IntensityImage,
    pub mask: InstanceMask,
    pub flows: FlowTarget,
    pub perlin_image: IntensityImage,
    pub perlin_flows: FlowTarget,
}

/// A batch as tensors: `real (N,1,H,W)`, `flows (N,3,H,W)`,
/// `perlin_image (N,1,H,W)`, `perlin_flows (N,3,H,W)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub real: Tensor,
    pub masks: Vec<InstanceMask>,
    pub flows: Tensor,
    pub perlin_image: Tensor,
    pub perlin_flows: Tensor,
}

pub fn image_tensor(images: &[&IntensityImage], device: &Device, dtype: DType) -> Result<Tensor> {
    let (h, w) = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?.dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::Shape("images in a batch must share one size".into()));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

pub fn flow_tensor(flows: &[&FlowTarget], device: &Device, dtype: DType) -> Result<Tensor> {
    let (h, w) = flows.first().ok_or_else(|| Error::Shape("empty batch".into()))?.dim();
    let mut data = Vec::with_capacity(flows.len() * 3 * h * w);
    for f in flows {
        if f.dim() != (h, w) {
            return Err(Error::Shape("flow targets in a batch must share one size".into()));
        }
        data.extend(f.to_array().iter().copied());
    }
    Ok(Tensor::from_vec(data, (flows.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// `(N, C, H, W)` → per-sample, per-channel arrays.
pub fn tensor_to_arrays(t: &Tensor) -> Result<Vec<Vec<Array2<f32>>>> {
    let (n, c, h, w) = t.dims4()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let off = (i * c + ch) * h * w;
                    Array2::from_shape_vec((h, w), data[off..off + h * w].to_vec()).expect("shape")
                })
                .collect()
        })
        .collect())
}

pub struct DataStream {
    images: Vec<IntensityImage>,
    cfg: TrainConfig,
    perlin: PerlinConfig,
}

impl DataStream {
    /// `images` are unlabeled training images normalized to `[0, 1]`.
    pub fn new(images: Vec<IntensityImage>, cfg: &TrainConfig, perlin: PerlinConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("no training images".into()));
        }
        for img in &images {
            cfg.augment.validate(img.dim())?;
        }
        perlin.validate()?;
        Ok(Self { images, cfg: cfg.clone(), perlin })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.images.len().div_ceil(self.cfg.batch_size)
    }

    pub fn epoch_of(&self, step: usize) -> usize {
        step / self.steps_per_epoch()
    }

    pub fn perlin_config(&self) -> &PerlinConfig {
        &self.perlin
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.images.len()).collect();
        idx.shuffle(&mut rng_for(derive_seed(self.cfg.seed, epoch as u64), TAG_SHUFFLE));
        idx
    }

    pub fn sample(&self, step: usize, slot: usize) -> Result<Sample> {
        let cfg = &self.cfg;
        let epoch = self.epoch_of(step);
        let pos = (step % self.steps_per_epoch()) * cfg.batch_size + slot;
        let index = self.order(epoch)[pos % self.images.len()];
        let seed = derive_seed(derive_seed(cfg.seed, step as u64), slot as u64);

        let (real, _) = augment(&self.images[index], None, &cfg.augment, derive_seed(seed, TAG_AUGMENT))?;
        let ellipse = cfg.ellipse_config();
        let mask = synthesize_mask(&ellipse, &cfg.deform, derive_seed(seed, TAG_MASK))?;
        let flows = encode_flows(&mask);

        let perlin_mask = synthesize_mask(&ellipse, &cfg.deform, derive_seed(seed, TAG_PERLIN_MASK))?;
        let (lo, hi) = cfg.perlin_blur_range;
        let sigma = if hi > lo { rng_for(seed, TAG_BLUR).random_range(lo..=hi) } else { lo };
        let perlin = PerlinConfig { blur_sigma: sigma, ..self.perlin.clone() };
        let perlin_image = render_perlin_image(&perlin_mask, &perlin, derive_seed(seed, TAG_PERLIN))?;
        Ok(Sample {
            real: to_signed(&real),
            mask,
            flows,
            perlin_image: to_signed(&perlin_image),
            perlin_flows: encode_flows(&perlin_mask),
        })
    }

    pub fn batch(&self, step: usize, device: &Device, dtype: DType) -> Result<Batch> {
        let samples = (0..self.cfg.batch_size)
            .map(|slot| self.sample(step, slot))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            real: image_tensor(&samples.iter().map(|s| &s.real).collect::<Vec<_>>(), device, dtype)?,
            flows: flow_tensor(&samples.iter().map(|s| &s.flows).collect::<Vec<_>>(), device, dtype)?,
            perlin_image: image_tensor(&samples.iter().map(|s| &s.perlin_image).collect::<Vec<_>>(), device, dtype)?,
            perlin_flows: flow_tensor(&samples.iter().map(|s| &s.perlin_flows).collect::<Vec<_>>(), device, dtype)?,
            masks: samples.into_iter().map(|s| s.mask).collect(),
        })
    }
}
