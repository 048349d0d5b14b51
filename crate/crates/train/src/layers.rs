//! Parameter storage and the handful of layers the four networks need.
//!
//! Weights live in [`ParamStore`] as candle `Var`s keyed by dotted names.
//! Each store carries a freeze flag shared with its layers: a frozen layer
//! hands out detached weights, so no gradient can reach its parameters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Storage, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    /// Symmetric uniform with the given bound.
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone)]
struct Flags {
    frozen: Arc<AtomicBool>,
    training: Arc<AtomicBool>,
}

impl Flags {
    fn frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }
    fn training(&self) -> bool {
        self.training.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    var: Var,
    flags: Flags,
}

impl Param {
    pub fn t(&self) -> Tensor {
        if self.flags.frozen() {
            self.var.as_detached_tensor()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    flags: Flags,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(device: &Device, dtype: DType, seed: u64) -> Self {
        Self {
            device: device.clone(),
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            flags: Flags {
                frozen: Arc::new(AtomicBool::new(false)),
                training: Arc::new(AtomicBool::new(true)),
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Uniform(bound) => {
                let dist =
                    Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        if self.params.insert(name.to_string(), var.clone()).is_some() {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        Ok(Param { var, flags: self.flags.clone() })
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.flags.frozen.store(frozen, Ordering::Relaxed);
    }

    pub fn is_frozen(&self) -> bool {
        self.flags.frozen()
    }

    pub fn set_training(&self, training: bool) {
        self.flags.training.store(training, Ordering::Relaxed);
    }

    pub fn is_training(&self) -> bool {
        self.flags.training()
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters and buffers, for serialization.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path)?;
        Ok(())
    }

    /// Overwrite every parameter and buffer from `tensors`; names and shapes
    /// must match exactly.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.assign(&tensors)
    }
}

/// 2-D convolution (no dilation, no groups) whose backward pass computes the
/// input gradient as a regular convolution of the zero-interleaved output
/// gradient with the flipped kernel, which is much faster on the CPU than a
/// direct transposed convolution.
struct FastConv {
    stride: usize,
    padding: usize,
}

fn cpu_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv input must be contiguous".into()))?;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[a..b], l.shape(), &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[a..b], l.shape(), &Device::Cpu),
        _ => Err(candle_core::Error::Msg("conv supports f32 and f64 only".into())),
    }
}

/// Insert `s - 1` zeros between neighbouring pixels.
fn interleave_zeros(x: &Tensor, s: usize) -> candle_core::Result<Tensor> {
    if s == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h, 1, w, 1))?
        .pad_with_zeros(3, 0, s - 1)?
        .pad_with_zeros(5, 0, s - 1)?
        .reshape((n, c, h * s, w * s))?
        .narrow(2, 0, (h - 1) * s + 1)?
        .narrow(3, 0, (w - 1) * s + 1)
}

/// `(c_out, c_in, k, k)` → `(c_in, c_out, k, k)` rotated by 180°.
fn flip_transpose(w: &Tensor) -> candle_core::Result<Tensor> {
    let k = w.dim(2)?;
    let rev = Tensor::from_vec((0..k as u32).rev().collect::<Vec<_>>(), k, w.device())?;
    w.index_select(&rev, 2)?.index_select(&rev, 3)?.transpose(0, 1)?.contiguous()
}

impl CustomOp2 for FastConv {
    fn name(&self) -> &'static str {
        "fast-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let y = cpu_tensor(s1, l1)?.conv2d(&cpu_tensor(s2, l2)?, self.padding, self.stride, 1, 1)?;
        let (storage, layout) = y.storage_and_layout();
        match (&*storage, layout.contiguous_offsets()) {
            (Storage::Cpu(c), Some((0, _))) => Ok((c.clone(), y.shape().clone())),
            _ => Err(candle_core::Error::Msg("unexpected conv output layout".into())),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let k = w.dim(2)?;
        let (s, p) = (self.stride, self.padding);
        // Rows and columns the forward pass never reached (stride remainder)
        // still need their zero gradient, hence the trailing padding.
        let (_, _, oh, ow) = grad.dims4()?;
        let g = interleave_zeros(grad, s)?
            .pad_with_zeros(2, 0, h + 2 * p - (oh - 1) * s - k)?
            .pad_with_zeros(3, 0, wd + 2 * p - (ow - 1) * s - k)?;
        let gx = g.conv2d(&flip_transpose(w)?, k - 1 - p, 1, 1, 1)?;

        let gk = x
            .transpose(0, 1)?
            .conv2d(&grad.transpose(0, 1)?, p, 1, s, 1)?
            .transpose(0, 1)?;
        let gk = gk.narrow(2, 0, k)?.narrow(3, 0, k)?;
        Ok((Some(gx), Some(gk)))
    }
}

/// Convolution with cheap gradients; same semantics as `Tensor::conv2d`
/// with unit dilation and a single group.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let k = w.dim(2)?;
    if padding >= k {
        return Err(Error::Shape(format!("padding {padding} must be below kernel size {k}")));
    }
    if !x.device().is_cpu() {
        return Ok(x.conv2d(w, padding, stride, 1, 1)?);
    }
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, FastConv { stride, padding })?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Param,
    b: Option<Param>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Weights ~ `init`; bias zero (or uniform when `init` is uniform).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let w = store.param(&format!("{name}.weight"), &[c_out, c_in, k, k], init)?;
        let b = if bias {
            let bi = match init {
                Init::Uniform(bound) => Init::Uniform(bound),
                _ => Init::Const(0.0),
            };
            Some(store.param(&format!("{name}.bias"), &[c_out], bi)?)
        } else {
            None
        };
        Ok(Self { w, b, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.w.t(), self.padding, self.stride)?;
        match &self.b {
            Some(b) => Ok(y.broadcast_add(&b.t().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Stride-2 transposed convolution doubling the spatial size
/// (kernel 3, padding 1, output padding 1).
#[derive(Debug, Clone)]
pub struct UpConv {
    w: Param,
    b: Param,
}

impl UpConv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            w: store.param(&format!("{name}.weight"), &[c_in, c_out, 3, 3], init)?,
            b: store.param(&format!("{name}.bias"), &[c_out], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Transposed convolution as a convolution over the zero-interleaved
        // input, padded 1 before and 2 after.
        let h = interleave_zeros(x, 2)?
            .pad_with_zeros(2, 1, 2)?
            .pad_with_zeros(3, 1, 2)?;
        let y = conv2d(&h, &flip_transpose(&self.w.t())?, 0, 1)?;
        Ok(y.broadcast_add(&self.b.t().reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Param,
    b: Param,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            w: store.param(&format!("{name}.weight"), &[d_out, d_in], init)?,
            b: store.param(&format!("{name}.bias"), &[d_out], init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w.t().t()?)?.broadcast_add(&self.b.t())?)
    }
}

/// Batch normalization with affine parameters and running statistics
/// (biased batch variance for normalization, unbiased for the running
/// estimate).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Param,
    beta: Param,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
    flags: Flags,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, momentum: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.weight"), &[c], Init::Const(1.0))?,
            beta: store.param(&format!("{name}.bias"), &[c], Init::Const(0.0))?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[c], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[c], 1.0)?,
            momentum,
            eps: 1e-5,
            flags: store.flags.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if self.flags.training() {
            let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let count = (n * h * w) as f64;
            if !self.flags.frozen() {
                let m = self.momentum;
                let unbiased = (var.detach() * (count / (count - 1.0).max(1.0)))?;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
            }
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_detached_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let xn = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.gamma.t().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.t().reshape((1, c, 1, 1))?)?)
    }
}

/// Per-sample, per-channel normalization without affine parameters.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((n, c, h, w))?)
}

/// Reflection padding without edge repetition.
pub fn reflect_pad(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if p >= h || p >= w {
        return Err(Error::Shape(format!("reflection pad {p} needs spatial size > {p}, got {h}x{w}")));
    }
    let index = |n: usize| -> Result<Tensor> {
        let idx: Vec<u32> = (0..n + 2 * p)
            .map(|i| {
                let j = i as isize - p as isize;
                let r = if j < 0 {
                    -j
                } else if j >= n as isize {
                    2 * (n as isize - 1) - j
                } else {
                    j
                };
                r as u32
            })
            .collect();
        Ok(Tensor::from_vec(idx, n + 2 * p, x.device())?)
    };
    Ok(x.index_select(&index(h)?, 2)?.index_select(&index(w)?, 3)?)
}

/// 2×2 max pooling, stride 2. The gradient goes to the first maximal
/// element of each window only, also when several elements tie.
struct MaxPool2;

/// Flat index of the first maximum of each 2×2 window.
fn window_argmax<T: PartialOrd + Copy>(v: &[T], n: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow);
    for plane in 0..n {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if v[i] > v[best] {
                        best = i;
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "max-pool-2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let (a, b) = l
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("pooling input must be contiguous".into()))?;
        let shape = Shape::from((n, c, h / 2, w / 2));
        Ok(match s {
            CpuStorage::F32(v) => {
                let v = &v[a..b];
                (CpuStorage::F32(window_argmax(v, n * c, h, w).into_iter().map(|i| v[i]).collect()), shape)
            }
            CpuStorage::F64(v) => {
                let v = &v[a..b];
                (CpuStorage::F64(window_argmax(v, n * c, h, w).into_iter().map(|i| v[i]).collect()), shape)
            }
            _ => return Err(candle_core::Error::Msg("pooling supports f32 and f64 only".into())),
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let v: Vec<f64> = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let mut mask = vec![0f64; v.len()];
        for i in window_argmax(&v, n * c, h, w) {
            mask[i] = 1.0;
        }
        let mask = Tensor::from_vec(mask, (n, c, h, w), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some((grad.upsample_nearest2d(h, w)? * mask)?))
    }
}

pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even sides, got {h}x{w}")));
    }
    if !x.device().is_cpu() {
        return Ok(x.max_pool2d(2)?);
    }
    Ok(x.contiguous()?.apply_op1(MaxPool2)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically safe logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_matches_mirror_without_edge() {
        let x = Tensor::arange(0f32, 4., &Device::Cpu).unwrap().reshape((1, 1, 1, 4)).unwrap();
        let x = x.repeat((1, 1, 3, 1)).unwrap();
        let y = reflect_pad(&x, 2).unwrap();
        let row: Vec<f32> = y.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![2., 1., 0., 1., 2., 3., 2., 1.]);
    }

    fn numeric_grads(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[i] += 1e-6;
                minus[i] -= 1e-6;
                let tp = Tensor::from_vec(plus, x.shape(), x.device()).unwrap();
                let tm = Tensor::from_vec(minus, x.shape(), x.device()).unwrap();
                (f(&tp) - f(&tm)) / 2e-6
            })
            .collect()
    }

    #[test]
    fn fast_conv_matches_reference_and_finite_differences() {
        let dev = Device::Cpu;
        for &(k, s, p, side) in &[(3, 1, 1, 7), (3, 2, 1, 8), (4, 2, 1, 9), (1, 1, 0, 5), (7, 1, 0, 9)] {
            let x = Tensor::randn(0f64, 1., (2, 2, side, side), &dev).unwrap();
            let w = Tensor::randn(0f64, 1., (3, 2, k, k), &dev).unwrap();
            let fast = conv2d(&x, &w, p, s).unwrap();
            let reference = x.conv2d(&w, p, s, 1, 1).unwrap();
            let diff: f64 = (fast.clone() - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(diff < 1e-10);
            let weights = Tensor::randn(0f64, 1., fast.shape(), &dev).unwrap();
            let xv = Var::from_tensor(&x).unwrap();
            let wv = Var::from_tensor(&w).unwrap();
            let loss = (conv2d(xv.as_tensor(), wv.as_tensor(), p, s).unwrap() * &weights).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let gx: Vec<f64> = grads.get(xv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let gw: Vec<f64> = grads.get(wv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let fx = |t: &Tensor| (t.conv2d(&w, p, s, 1, 1).unwrap() * &weights).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            let fw = |t: &Tensor| (x.conv2d(t, p, s, 1, 1).unwrap() * &weights).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            for (a, b) in gx.iter().zip(numeric_grads(fx, &x)) {
                assert!((a - b).abs() < 1e-5, "input grad k={k} s={s}: {a} vs {b}");
            }
            for (a, b) in gw.iter().zip(numeric_grads(fw, &w)) {
                assert!((a - b).abs() < 1e-5, "kernel grad k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn upconv_matches_transposed_conv() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(&dev, DType::F64, 3);
        let up = UpConv::new(&mut store, "u", 2, 3, Init::Normal(1.0)).unwrap();
        let x = Tensor::randn(0f64, 1., (1, 2, 5, 6), &dev).unwrap();
        let y = up.forward(&x).unwrap();
        let reference = x
            .conv_transpose2d(&up.w.t(), 1, 1, 2, 1)
            .unwrap()
            .broadcast_add(&up.b.t().reshape((1, 3, 1, 1)).unwrap())
            .unwrap();
        assert_eq!(y.dims(), &[1, 3, 10, 12]);
        let diff: f64 = (y - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-10);
    }

    #[test]
    fn max_pool_routes_gradient_to_first_maximum() {
        let d = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 6, 4), &d).unwrap();
        let ours: Vec<f32> = max_pool2(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let reference: Vec<f32> = x.max_pool2d(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(ours, reference);

        // A flat window: exactly one element receives the gradient.
        let v = Var::from_tensor(&Tensor::ones((1, 1, 2, 2), DType::F32, &d).unwrap()).unwrap();
        let grads = max_pool2(v.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g: Vec<f32> = grads.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(max_pool2(&Tensor::zeros((1, 1, 3, 4), DType::F32, &d).unwrap()).is_err());
    }

    #[test]
    fn frozen_params_are_detached() {
        let mut store = ParamStore::new(&Device::Cpu, DType::F32, 0);
        let conv = Conv2d::new(&mut store, "c", 1, 2, 3, 1, 1, true, Init::Normal(0.02)).unwrap();
        let x = Tensor::ones((1, 1, 5, 5), DType::F32, &Device::Cpu).unwrap();
        store.set_frozen(true);
        let grads = conv.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        for (_, v) in store.vars() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
        store.set_frozen(false);
        let grads = conv.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        for (_, v) in store.vars() {
            assert!(grads.get(v.as_tensor()).is_some());
        }
    }

    #[test]
    fn instance_norm_standardizes() {
        let x = Tensor::arange(0f32, 32., &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let y = instance_norm(&x).unwrap().flatten_from(2).unwrap();
        let mean: Vec<Vec<f32>> = y.mean(2).unwrap().to_vec2().unwrap();
        let var: Vec<Vec<f32>> = y.sqr().unwrap().mean(2).unwrap().to_vec2().unwrap();
        for c in 0..2 {
            assert!(mean[0][c].abs() < 1e-5);
            assert!((var[0][c] - 1.0).abs() < 1e-3);
        }
    }
}
