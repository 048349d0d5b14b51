//! Inference with the segmenter alone: normalize, predict flows (whole
//! image or overlapping tiles), decode instances.

use candle_core::Tensor;
use cyclepose_core::filters::reflect_index;
use cyclepose_core::normalize::{normalize_percentile, to_signed};
use cyclepose_core::{decode_flows, DecodeConfig, FlowTarget, InstanceMask, IntensityImage};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{image_tensor, tensor_to_arrays};
use crate::error::{Error, Result};
use crate::nets::Segmenter;
use crate::select::InstanceSegmenter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileConfig {
    pub size: usize,
    pub overlap: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { size: 224, overlap: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub decode: DecodeConfig,
    pub percentiles: (f64, f64),
    pub tile: Option<TileConfig>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { decode: DecodeConfig::default(), percentiles: (1.0, 99.0), tile: None }
    }
}

/// Maps an image in `[-1, 1]` to flows with the probability channel in
/// `[0, 1]`.
pub trait FlowPredictor {
    fn predict(&self, image: &IntensityImage) -> Result<FlowTarget>;
}

fn pad_reflect(img: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (ih, iw) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| img[[reflect_index(y as isize, ih), reflect_index(x as isize, iw)]])
}

impl FlowPredictor for Segmenter {
    fn predict(&self, image: &IntensityImage) -> Result<FlowTarget> {
        let (h, w) = image.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        let f = self.spec().size_factor();
        let padded = pad_reflect(image, h.div_ceil(f) * f, w.div_ceil(f) * f);
        let store = self.store();
        let x = image_tensor(&[&padded], store.device(), store.dtype())?;
        let was_training = store.is_training();
        store.set_training(false);
        let y = self.forward(&x);
        store.set_training(was_training);
        let y = y?;
        let prob = crate::layers::sigmoid(&y.narrow(1, 2, 1)?)?;
        let y = Tensor::cat(&[&y.narrow(1, 0, 2)?, &prob], 1)?;
        let ch = tensor_to_arrays(&y)?.remove(0);
        let crop = |a: &Array2<f32>| a.slice(s![..h, ..w]).to_owned();
        Ok(FlowTarget { flow_y: crop(&ch[0]), flow_x: crop(&ch[1]), prob: crop(&ch[2]) })
    }
}

impl<P: FlowPredictor + ?Sized> FlowPredictor for &P {
    fn predict(&self, image: &IntensityImage) -> Result<FlowTarget> {
        (**self).predict(image)
    }
}

fn tile_starts(len: usize, size: usize, stride: usize) -> Vec<usize> {
    if len <= size {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + size < len).collect();
    starts.push(len - size);
    starts
}

/// Linear ramp over `overlap` pixels at both ends, never reaching zero.
fn taper(len: usize, overlap: usize) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let d = i.min(len - 1 - i) as f32 + 1.0;
            (d / (overlap.max(1) as f32 + 1.0)).min(1.0)
        })
        .collect()
}

/// Predict on overlapping tiles and blend them with tapered weights.
pub fn predict_tiled<P: FlowPredictor + ?Sized>(
    predictor: &P,
    image: &IntensityImage,
    tile: &TileConfig,
) -> Result<FlowTarget> {
    if tile.size == 0 || tile.overlap >= tile.size {
        return Err(Error::Config("tile overlap must be smaller than the tile size".into()));
    }
    let (h, w) = image.dim();
    if h <= tile.size && w <= tile.size {
        return predictor.predict(image);
    }
    let stride = tile.size - tile.overlap;
    let mut acc = FlowTarget::zeros(h, w);
    let mut weight = Array2::<f32>::zeros((h, w));
    for &y0 in &tile_starts(h, tile.size, stride) {
        for &x0 in &tile_starts(w, tile.size, stride) {
            let (th, tw) = (tile.size.min(h), tile.size.min(w));
            let part = image.slice(s![y0..y0 + th, x0..x0 + tw]).to_owned();
            let pred = predictor.predict(&part)?;
            let (ry, rx) = (taper(th, tile.overlap), taper(tw, tile.overlap));
            for y in 0..th {
                for x in 0..tw {
                    let k = ry[y] * rx[x];
                    let (gy, gx) = (y0 + y, x0 + x);
                    acc.flow_y[[gy, gx]] += k * pred.flow_y[[y, x]];
                    acc.flow_x[[gy, gx]] += k * pred.flow_x[[y, x]];
                    acc.prob[[gy, gx]] += k * pred.prob[[y, x]];
                    weight[[gy, gx]] += k;
                }
            }
        }
    }
    for a in [&mut acc.flow_y, &mut acc.flow_x, &mut acc.prob] {
        a.zip_mut_with(&weight, |v, &k| *v /= k);
    }
    Ok(acc)
}

/// A flow predictor wrapped with decoding.
pub struct Predictor<P> {
    pub net: P,
    pub cfg: InferConfig,
}

impl<P: FlowPredictor> Predictor<P> {
    pub fn new(net: P, cfg: InferConfig) -> Self {
        Self { net, cfg }
    }

    pub fn flows(&self, image: &IntensityImage) -> Result<FlowTarget> {
        let signed = to_signed(image);
        match &self.cfg.tile {
            Some(t) => predict_tiled(&self.net, &signed, t),
            None => self.net.predict(&signed),
        }
    }

    /// Full inference on a raw image: percentile normalization first.
    pub fn infer(&self, raw: &IntensityImage) -> Result<InstanceMask> {
        let (lo, hi) = self.cfg.percentiles;
        self.segment(&normalize_percentile(raw, lo, hi))
    }
}

impl<P: FlowPredictor> InstanceSegmenter for Predictor<P> {
    fn segment(&self, image: &IntensityImage) -> Result<InstanceMask> {
        Ok(decode_flows(&self.flows(image)?, &self.cfg.decode))
    }
}
