//! The four trainable networks: a ResNet image generator, a residual U-Net
//! segmenter predicting flows plus a probability logit, and PatchGAN
//! discriminators.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    instance_norm, leaky_relu, max_pool2, reflect_pad, BatchNorm2d, Conv2d, Init, Linear, ParamStore, UpConv,
};

const GAN_INIT: Init = Init::Normal(0.02);
const BN_MOMENTUM: f64 = 0.05;

fn check_spatial(x: &Tensor, channels: usize, factor: usize, what: &str) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != channels {
        return Err(Error::Shape(format!("{what} expects {channels} input channels, got {c}")));
    }
    if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "{what} needs height and width divisible by {factor}, got {h}x{w}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub residual_blocks: usize,
    pub base_width: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { in_channels: 3, out_channels: 1, residual_blocks: 9, base_width: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_width: usize,
    pub style: bool,
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        Self { in_channels: 1, out_channels: 3, depth: 4, base_width: 32, style: true }
    }
}

impl SegmenterSpec {
    /// Spatial sizes must be multiples of this.
    pub fn size_factor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub layers: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self { in_channels: 1, base_width: 64, layers: 3 }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

pub struct Generator {
    spec: GeneratorSpec,
    store: ParamStore,
    head: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<(Conv2d, Conv2d)>,
    up: Vec<UpConv>,
    tail: Conv2d,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        positive("generator in_channels", spec.in_channels)?;
        positive("generator out_channels", spec.out_channels)?;
        positive("generator base_width", spec.base_width)?;
        let mut s = ParamStore::new(device, dtype, seed);
        let w = spec.base_width;
        let head = Conv2d::new(&mut s, "head", spec.in_channels, w, 7, 1, 0, true, GAN_INIT)?;
        let down = vec![
            Conv2d::new(&mut s, "down.0", w, 2 * w, 3, 2, 1, true, GAN_INIT)?,
            Conv2d::new(&mut s, "down.1", 2 * w, 4 * w, 3, 2, 1, true, GAN_INIT)?,
        ];
        let blocks = (0..spec.residual_blocks)
            .map(|i| {
                Ok((
                    Conv2d::new(&mut s, &format!("block.{i}.0"), 4 * w, 4 * w, 3, 1, 0, true, GAN_INIT)?,
                    Conv2d::new(&mut s, &format!("block.{i}.1"), 4 * w, 4 * w, 3, 1, 0, true, GAN_INIT)?,
                ))
            })
            .collect::<Result<_>>()?;
        let up = vec![
            UpConv::new(&mut s, "up.0", 4 * w, 2 * w, GAN_INIT)?,
            UpConv::new(&mut s, "up.1", 2 * w, w, GAN_INIT)?,
        ];
        let tail = Conv2d::new(&mut s, "tail", w, spec.out_channels, 7, 1, 0, true, GAN_INIT)?;
        let g = Self { spec, store: s, head, down, blocks, up, tail };
        log::info!("generator: {} parameters", g.store.parameter_count());
        Ok(g)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(N, in, H, W)` → `(N, out, H, W)` in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_spatial(x, self.spec.in_channels, 4, "generator")?;
        let mut h = self.head.forward(&reflect_pad(x, 3)?)?;
        h = instance_norm(&h)?.relu()?;
        for conv in &self.down {
            h = instance_norm(&conv.forward(&h)?)?.relu()?;
        }
        for (c0, c1) in &self.blocks {
            let r = instance_norm(&c0.forward(&reflect_pad(&h, 1)?)?)?.relu()?;
            let r = instance_norm(&c1.forward(&reflect_pad(&r, 1)?)?)?;
            h = (h + r)?;
        }
        for conv in &self.up {
            h = instance_norm(&conv.forward(&h)?)?.relu()?;
        }
        Ok(self.tail.forward(&reflect_pad(&h, 3)?)?.tanh()?)
    }
}

/// Normalization, ReLU, then convolution.
struct BatchConv {
    bn: BatchNorm2d,
    conv: Conv2d,
    relu: bool,
}

impl BatchConv {
    fn new(s: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, relu: bool) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Self {
            bn: BatchNorm2d::new(s, &format!("{name}.bn"), c_in, BN_MOMENTUM)?,
            conv: Conv2d::new(s, &format!("{name}.conv"), c_in, c_out, k, 1, k / 2, true, Init::Uniform(bound))?,
            relu,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.bn.forward(x)?;
        if self.relu {
            h = h.relu()?;
        }
        self.conv.forward(&h)
    }
}

struct ResDown {
    proj: BatchConv,
    convs: [BatchConv; 4],
}

impl ResDown {
    fn new(s: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            proj: BatchConv::new(s, &format!("{name}.proj"), c_in, c_out, 1, false)?,
            convs: [
                BatchConv::new(s, &format!("{name}.conv.0"), c_in, c_out, 3, true)?,
                BatchConv::new(s, &format!("{name}.conv.1"), c_out, c_out, 3, true)?,
                BatchConv::new(s, &format!("{name}.conv.2"), c_out, c_out, 3, true)?,
                BatchConv::new(s, &format!("{name}.conv.3"), c_out, c_out, 3, true)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = (self.proj.forward(x)? + self.convs[1].forward(&self.convs[0].forward(x)?)?)?;
        Ok((&h + self.convs[3].forward(&self.convs[2].forward(&h)?)?)?)
    }
}

/// Convolution whose input is shifted by a per-channel projection of the
/// style vector (and optionally a skip connection).
struct StyleConv {
    conv: BatchConv,
    full: Option<Linear>,
}

impl StyleConv {
    fn new(s: &mut ParamStore, name: &str, c_in: usize, c_out: usize, style: Option<usize>) -> Result<Self> {
        let full = match style {
            Some(sc) => Some(Linear::new(
                s,
                &format!("{name}.full"),
                sc,
                c_in,
                Init::Uniform(1.0 / (sc as f64).sqrt()),
            )?),
            None => None,
        };
        Ok(Self { conv: BatchConv::new(s, &format!("{name}.conv"), c_in, c_out, 3, true)?, full })
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, style: Option<&Tensor>) -> Result<Tensor> {
        let mut h = match skip {
            Some(y) => (x + y)?,
            None => x.clone(),
        };
        if let (Some(full), Some(style)) = (&self.full, style) {
            let feat = full.forward(style)?;
            h = h.broadcast_add(&feat.unsqueeze(2)?.unsqueeze(3)?)?;
        }
        self.conv.forward(&h)
    }
}

struct ResUp {
    proj: BatchConv,
    conv0: BatchConv,
    convs: [StyleConv; 3],
}

impl ResUp {
    fn new(s: &mut ParamStore, name: &str, c_in: usize, c_out: usize, style: Option<usize>) -> Result<Self> {
        Ok(Self {
            proj: BatchConv::new(s, &format!("{name}.proj"), c_in, c_out, 1, false)?,
            conv0: BatchConv::new(s, &format!("{name}.conv.0"), c_in, c_out, 3, true)?,
            convs: [
                StyleConv::new(s, &format!("{name}.conv.1"), c_out, c_out, style)?,
                StyleConv::new(s, &format!("{name}.conv.2"), c_out, c_out, style)?,
                StyleConv::new(s, &format!("{name}.conv.3"), c_out, c_out, style)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor, skip: &Tensor, style: Option<&Tensor>) -> Result<Tensor> {
        let h = (self.proj.forward(x)? + self.convs[0].forward(&self.conv0.forward(x)?, Some(skip), style)?)?;
        let r = self.convs[2].forward(&self.convs[1].forward(&h, None, style)?, None, style)?;
        Ok((h + r)?)
    }
}

pub struct Segmenter {
    spec: SegmenterSpec,
    store: ParamStore,
    down: Vec<ResDown>,
    up: Vec<ResUp>,
    output: BatchConv,
}

impl Segmenter {
    pub fn new(spec: SegmenterSpec, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        positive("segmenter in_channels", spec.in_channels)?;
        positive("segmenter out_channels", spec.out_channels)?;
        positive("segmenter base_width", spec.base_width)?;
        if spec.depth < 2 || spec.depth > 8 {
            return Err(Error::Config(format!("segmenter depth must be in 2..=8, got {}", spec.depth)));
        }
        let mut s = ParamStore::new(device, dtype, seed);
        let widths: Vec<usize> = std::iter::once(spec.in_channels)
            .chain((0..spec.depth).map(|i| spec.base_width << i))
            .collect();
        let down = (0..spec.depth)
            .map(|i| ResDown::new(&mut s, &format!("down.{i}"), widths[i], widths[i + 1]))
            .collect::<Result<_>>()?;
        let style = spec.style.then_some(widths[spec.depth]);
        let mut up_widths = widths[1..].to_vec();
        up_widths.push(widths[spec.depth]);
        let up = (1..up_widths.len())
            .map(|i| ResUp::new(&mut s, &format!("up.{}", i - 1), up_widths[i], up_widths[i - 1], style))
            .collect::<Result<_>>()?;
        let output = BatchConv::new(&mut s, "output", widths[1], spec.out_channels, 1, true)?;
        let net = Self { spec, store: s, down, up, output };
        log::info!("segmenter: {} parameters", net.store.parameter_count());
        Ok(net)
    }

    pub fn spec(&self) -> &SegmenterSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(N, 1, H, W)` → `(N, 3, H, W)`: flow_y, flow_x, probability logit.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_spatial(x, self.spec.in_channels, self.spec.size_factor(), "segmenter")?;
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x.clone();
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h = max_pool2(&h)?;
            }
            h = block.forward(&h)?;
            skips.push(h.clone());
        }
        let style = if self.spec.style {
            let (n, c, _, _) = h.dims4()?;
            let pooled = h.flatten_from(2)?.mean(2)?.reshape((n, c))?;
            let norm = pooled.sqr()?.sum_keepdim(1)?.sqrt()?;
            Some(pooled.broadcast_div(&(norm + 1e-12)?)?)
        } else {
            None
        };
        let last = self.up.len() - 1;
        let mut y = self.up[last].forward(&h, &h, style.as_ref())?;
        for i in (0..last).rev() {
            let (_, _, hh, ww) = y.dims4()?;
            y = y.upsample_nearest2d(2 * hh, 2 * ww)?;
            y = self.up[i].forward(&y, &skips[i], style.as_ref())?;
        }
        self.output.forward(&y)
    }
}

pub struct Discriminator {
    spec: DiscriminatorSpec,
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        positive("discriminator in_channels", spec.in_channels)?;
        positive("discriminator base_width", spec.base_width)?;
        let mut s = ParamStore::new(device, dtype, seed);
        let w = spec.base_width;
        let mut convs = vec![Conv2d::new(&mut s, "conv.0", spec.in_channels, w, 4, 2, 1, true, GAN_INIT)?];
        let mut prev = 1;
        for n in 1..=spec.layers {
            let mult = (1usize << n).min(8);
            let stride = if n == spec.layers { 1 } else { 2 };
            convs.push(Conv2d::new(&mut s, &format!("conv.{n}"), w * prev, w * mult, 4, stride, 1, true, GAN_INIT)?);
            prev = mult;
        }
        convs.push(Conv2d::new(&mut s, &format!("conv.{}", spec.layers + 1), w * prev, 1, 4, 1, 1, true, GAN_INIT)?);
        let d = Self { spec, store: s, convs };
        log::info!("discriminator({} ch): {} parameters", spec.in_channels, d.store.parameter_count());
        Ok(d)
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Side length of the score grid for an input side length.
    pub fn output_side(&self, side: usize) -> usize {
        let mut s = side as isize;
        for n in 0..=self.spec.layers + 1 {
            let stride = if n < self.spec.layers { 2 } else { 1 };
            s = (s + 2 - 4) / stride + 1;
        }
        s.max(0) as usize
    }

    /// `(N, C, H, W)` → `(N, 1, h, w)` patch scores.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        if self.output_side(h) == 0 || self.output_side(w) == 0 {
            return Err(Error::Shape(format!("discriminator input {h}x{w} is too small")));
        }
        let last = self.convs.len() - 1;
        let mut y = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y)?;
            if i == last {
                break;
            }
            if i > 0 {
                y = instance_norm(&y)?;
            }
            y = leaky_relu(&y, 0.2)?;
        }
        Ok(y)
    }
}
