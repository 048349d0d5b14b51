//! Joint training of generator, segmenter and the two discriminators.
//!
//! Each step updates G and S together on the full objective (discriminators
//! frozen), then the image discriminator, then the flow discriminator
//! (G and S frozen), each discriminator seeing pooled fakes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use cyclepose_core::perlin::fit_intensity_ranges;
use cyclepose_core::rng::{derive_seed, rng_for};
use cyclepose_core::IntensityImage;
use serde::{Deserialize, Serialize};

use crate::config::{Terms, TrainConfig};
use crate::data::{Batch, DataStream};
use crate::error::{Error, Result};
use crate::layers::sigmoid;
use crate::losses::{
    l1, lsgan, m2i_total, read_records_csv, scalar, seg_loss, write_records_csv, LossRecord, LossWeights,
    M2iMasks,
};
use crate::nets::{Discriminator, DiscriminatorSpec, Generator, Segmenter};
use crate::optim::{AdamW, AdamWConfig};
use crate::pool::ImagePool;

const TAG_POOL: u64 = 0x504F;
const TAG_INIT: u64 = 0x1A17;

pub struct Networks {
    pub g: Generator,
    pub s: Segmenter,
    pub d_img: Discriminator,
    pub d_seg: Discriminator,
}

impl Networks {
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        let dtype = if cfg.f64 { DType::F64 } else { DType::F32 };
        let seed = |k| derive_seed(cfg.seed, TAG_INIT + k);
        let d_img = DiscriminatorSpec { in_channels: cfg.generator.out_channels, ..cfg.discriminator };
        let d_seg = DiscriminatorSpec { in_channels: cfg.segmenter.out_channels, ..cfg.discriminator };
        if cfg.generator.in_channels != cfg.segmenter.out_channels
            || cfg.segmenter.in_channels != cfg.generator.out_channels
        {
            return Err(Error::Config("generator and segmenter channel counts must mirror each other".into()));
        }
        Ok(Self {
            g: Generator::new(cfg.generator, device, dtype, seed(0))?,
            s: Segmenter::new(cfg.segmenter, device, dtype, seed(1))?,
            d_img: Discriminator::new(d_img, device, dtype, seed(2))?,
            d_seg: Discriminator::new(d_seg, device, dtype, seed(3))?,
        })
    }

    fn stores(&self) -> [(&'static str, &crate::layers::ParamStore); 4] {
        [
            ("g", self.g.store()),
            ("s", self.s.store()),
            ("d_img", self.d_img.store()),
            ("d_seg", self.d_seg.store()),
        ]
    }

    /// Freeze the discriminators (`true`) or the generator and segmenter
    /// (`false`).
    pub fn focus_generators(&self, generators: bool) {
        self.g.store().set_frozen(!generators);
        self.s.store().set_frozen(!generators);
        self.d_img.store().set_frozen(generators);
        self.d_seg.store().set_frozen(generators);
    }
}

/// Map segmenter logits to the generator's input domain: flows unchanged,
/// probability through a sigmoid.
pub fn to_flow_domain(logits: &Tensor) -> Result<Tensor> {
    let flows = logits.narrow(1, 0, 2)?;
    let prob = sigmoid(&logits.narrow(1, 2, 1)?)?;
    Ok(Tensor::cat(&[&flows, &prob], 1)?)
}

/// The generator/segmenter objective of one batch.
pub struct Objective {
    pub total: Tensor,
    pub adv_g: Option<Tensor>,
    pub adv_s: Option<Tensor>,
    pub cyc_g: Option<Tensor>,
    pub cyc_s: Option<Tensor>,
    pub perlin: Option<Tensor>,
    pub m2i: Option<Tensor>,
    /// Generated image for the synthetic masks, when computed.
    pub fake_image: Option<Tensor>,
    /// Segmenter output on the real images in flow domain, when computed.
    pub fake_flows: Option<Tensor>,
}

/// Evaluate the weighted sum of all enabled generator/segmenter terms.
/// `m2i_extrema` pins the per-image extrema of the mask-to-image loss.
pub fn objective(
    nets: &Networks,
    batch: &Batch,
    terms: Terms,
    weights: &LossWeights,
    m2i_extrema: Option<&(Tensor, Tensor)>,
) -> Result<Objective> {
    let mut out = Objective {
        total: Tensor::zeros((), batch.real.dtype(), batch.real.device())?,
        adv_g: None,
        adv_s: None,
        cyc_g: None,
        cyc_s: None,
        perlin: None,
        m2i: None,
        fake_image: None,
        fake_flows: None,
    };
    // Mask cycle: flows → image → flows.
    if terms.cyc || terms.m2i || terms.adv {
        let fake = nets.g.forward(&batch.flows)?;
        if terms.cyc {
            let rec = nets.s.forward(&fake)?;
            out.cyc_s = Some((seg_loss(&rec, &batch.flows, weights.flow_scale)?.combined()? * weights.w_cyc_mask)?);
        }
        if terms.m2i {
            let masks = M2iMasks::new(&batch.masks, weights.dilation_d, fake.device(), fake.dtype())?;
            out.m2i = Some(m2i_total(&masks, &fake, weights, m2i_extrema)?);
        }
        if terms.adv {
            out.adv_g = Some((lsgan(&nets.d_img.forward(&fake)?, true)? * weights.w_adv)?);
        }
        out.fake_image = Some(fake);
    }
    // Image cycle: image → flows → image.
    if terms.cyc || terms.adv {
        let seg = to_flow_domain(&nets.s.forward(&batch.real)?)?;
        if terms.cyc {
            let rec = nets.g.forward(&seg)?;
            out.cyc_g = Some((l1(&rec, &batch.real)? * weights.w_cyc_img)?);
        }
        if terms.adv {
            out.adv_s = Some((lsgan(&nets.d_seg.forward(&seg)?, true)? * weights.w_adv)?);
        }
        out.fake_flows = Some(seg);
    }
    if terms.perlin {
        let pred = nets.s.forward(&batch.perlin_image)?;
        out.perlin = Some((seg_loss(&pred, &batch.perlin_flows, weights.flow_scale)?.combined()? * weights.w_perlin)?);
    }
    for t in [&out.adv_g, &out.adv_s, &out.cyc_g, &out.cyc_s, &out.perlin, &out.m2i].into_iter().flatten() {
        out.total = (&out.total + t)?;
    }
    Ok(out)
}

fn opt_scalar(t: &Option<Tensor>) -> Result<Option<f64>> {
    t.as_ref().map(scalar).transpose()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointState {
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    /// Perlin configuration actually used (intensity ranges may be fitted).
    pub perlin: cyclepose_core::PerlinConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub perlin: cyclepose_core::PerlinConfig,
    pub train_images: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

/// Exported segmenter: weights plus the architecture needed to rebuild it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmenterExport {
    pub spec: crate::nets::SegmenterSpec,
    pub step: usize,
    pub epoch: usize,
    pub config_hash: String,
}

pub const SEGMENTER_WEIGHTS: &str = "segmenter.safetensors";
pub const SEGMENTER_META: &str = "segmenter.json";

pub struct Trainer {
    cfg: TrainConfig,
    device: Device,
    dtype: DType,
    nets: Networks,
    opt_gs: AdamW,
    opt_d_img: AdamW,
    opt_d_seg: AdamW,
    pool_img: ImagePool,
    pool_seg: ImagePool,
    stream: DataStream,
    step: usize,
    records: Vec<LossRecord>,
    run_dir: Option<PathBuf>,
}

impl Trainer {
    /// `images` are the unlabeled training images normalized to `[0, 1]`.
    pub fn new(cfg: TrainConfig, images: Vec<IntensityImage>, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut perlin = cfg.perlin.clone();
        if cfg.fit_perlin_intensity {
            let (fg, bg) = fit_intensity_ranges(&images)?;
            let fitted = cyclepose_core::PerlinConfig {
                fg_intensity_range: fg,
                bg_intensity_range: bg,
                ..perlin.clone()
            };
            match fitted.validate() {
                Ok(()) => perlin = fitted,
                Err(e) => log::warn!("fitted Perlin intensity ranges rejected ({e}); keeping configured ranges"),
            }
        }
        Self::build(cfg, images, device, perlin)
    }

    fn build(
        cfg: TrainConfig,
        images: Vec<IntensityImage>,
        device: &Device,
        perlin: cyclepose_core::PerlinConfig,
    ) -> Result<Self> {
        let stream = DataStream::new(images, &cfg, perlin)?;
        let nets = Networks::new(&cfg, device)?;
        let adam = AdamWConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8, weight_decay: cfg.weight_decay };
        let named = |prefix: &str, store: &crate::layers::ParamStore| -> Vec<(String, candle_core::Var)> {
            store.vars().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect()
        };
        let gs: Vec<_> = named("g", nets.g.store()).into_iter().chain(named("s", nets.s.store())).collect();
        let dimg = named("d_img", nets.d_img.store());
        let dseg = named("d_seg", nets.d_seg.store());
        Ok(Self {
            opt_gs: AdamW::new(gs.iter().map(|(k, v)| (k.clone(), v)), adam)?,
            opt_d_img: AdamW::new(dimg.iter().map(|(k, v)| (k.clone(), v)), adam)?,
            opt_d_seg: AdamW::new(dseg.iter().map(|(k, v)| (k.clone(), v)), adam)?,
            pool_img: ImagePool::new(cfg.pool_size),
            pool_seg: ImagePool::new(cfg.pool_size),
            dtype: if cfg.f64 { DType::F64 } else { DType::F32 },
            device: device.clone(),
            stream,
            nets,
            step: 0,
            records: Vec::new(),
            run_dir: None,
            cfg,
        })
    }

    /// Attach a run directory: writes `manifest.json`, and from then on
    /// `losses.csv` and `checkpoints/`.
    pub fn with_run_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            perlin: self.stream.perlin_config().clone(),
            train_images: self.stream.len(),
            steps_per_epoch: self.stream.steps_per_epoch(),
            total_steps: self.total_steps(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        let csv = dir.join("losses.csv");
        if csv.exists() {
            let kept: Vec<_> = read_records_csv(&csv)?.into_iter().filter(|r| r.step < self.step).collect();
            write_records_csv(&csv, &kept)?;
        }
        self.run_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn segmenter(&self) -> &Segmenter {
        &self.nets.s
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.stream.epoch_of(self.step)
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn stream(&self) -> &DataStream {
        &self.stream
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.total_epochs() * self.stream.steps_per_epoch()
    }

    pub fn batch(&self, step: usize) -> Result<Batch> {
        self.stream.batch(step, &self.device, self.dtype)
    }

    pub fn train_step(&mut self) -> Result<LossRecord> {
        let step = self.step;
        let epoch = self.epoch();
        let lr = self.cfg.lr_at(epoch);
        let batch = self.batch(step)?;
        let terms = self.cfg.terms;

        self.nets.focus_generators(true);
        let obj = objective(&self.nets, &batch, terms, &self.cfg.weights, None)?;
        let mut record = LossRecord {
            step,
            epoch,
            lr,
            adv_g: opt_scalar(&obj.adv_g)?,
            adv_s: opt_scalar(&obj.adv_s)?,
            cyc_g: opt_scalar(&obj.cyc_g)?,
            cyc_s: opt_scalar(&obj.cyc_s)?,
            perlin: opt_scalar(&obj.perlin)?,
            m2i: opt_scalar(&obj.m2i)?,
            total: scalar(&obj.total)?,
            d_img: None,
            d_seg: None,
        };
        self.guard(&record)?;
        let grads = obj.total.backward()?;
        self.opt_gs.step(&grads, lr)?;
        drop(grads);

        if terms.adv {
            self.nets.focus_generators(false);
            let mut rng = rng_for(derive_seed(self.cfg.seed, step as u64), TAG_POOL);
            let fake_image = obj.fake_image.as_ref().expect("adversarial terms compute the fake image");
            let fake_flows = obj.fake_flows.as_ref().expect("adversarial terms compute the fake flows");
            let pooled = pool_batch(&mut self.pool_img, fake_image, &mut rng)?;
            let d = &self.nets.d_img;
            let loss = ((lsgan(&d.forward(&batch.real)?, true)? + lsgan(&d.forward(&pooled)?, false)?)? * 0.5)?;
            record.d_img = Some(scalar(&loss)?);
            self.guard(&record)?;
            self.opt_d_img.step(&loss.backward()?, lr)?;

            let pooled = pool_batch(&mut self.pool_seg, fake_flows, &mut rng)?;
            let d = &self.nets.d_seg;
            let loss = ((lsgan(&d.forward(&batch.flows)?, true)? + lsgan(&d.forward(&pooled)?, false)?)? * 0.5)?;
            record.d_seg = Some(scalar(&loss)?);
            self.guard(&record)?;
            self.opt_d_seg.step(&loss.backward()?, lr)?;
            self.nets.focus_generators(true);
        }

        self.step += 1;
        if let Some(dir) = &self.run_dir {
            append_csv(&dir.join("losses.csv"), &record)?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Abort on non-finite values, leaving a checkpoint of the pre-update
    /// state and the offending record behind.
    fn guard(&self, record: &LossRecord) -> Result<()> {
        let Some(term) = record.non_finite() else { return Ok(()) };
        let base = match &self.run_dir {
            Some(d) => d.join("diagnostics"),
            None => std::env::temp_dir().join(format!("cyclepose-diagnostics-{}", self.cfg.seed)),
        };
        let dump = base.join(format!("step_{:08}", record.step));
        let _ = fs::remove_dir_all(&dump);
        fs::create_dir_all(&base)?;
        self.write_checkpoint(&dump)?;
        fs::write(dump.join("record.json"), serde_json::to_string_pretty(record)?)?;
        Err(Error::NonFinite { step: record.step, term: term.to_string(), dump })
    }

    /// Train until `until_step` (default: the end of the schedule),
    /// checkpointing every `checkpoint_every` epochs and at the end when a
    /// run directory is attached.
    pub fn run(&mut self, until_step: Option<usize>) -> Result<()> {
        let end = until_step.unwrap_or(self.total_steps()).min(self.total_steps());
        let spe = self.stream.steps_per_epoch();
        while self.step < end {
            let r = self.train_step()?;
            if r.step % 50 == 0 {
                log::info!("step {} epoch {} lr {:.2e} total {:.4}", r.step, r.epoch, r.lr, r.total);
            }
            let epoch_done = self.step % spe == 0;
            let finished = self.step == self.total_steps();
            if self.run_dir.is_some()
                && (finished || (epoch_done && (self.step / spe) % self.cfg.checkpoint_every == 0))
            {
                self.save_checkpoint()?;
            }
        }
        Ok(())
    }

    /// Write a checkpoint under `<run>/checkpoints/step_XXXXXXXX`.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = self
            .run_dir
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no run directory attached".into()))?
            .join("checkpoints");
        let target = dir.join(format!("step_{:08}", self.step));
        let tmp = dir.join(format!(".tmp_step_{:08}", self.step));
        let _ = fs::remove_dir_all(&tmp);
        self.write_checkpoint(&tmp)?;
        if target.exists() {
            fs::remove_dir_all(&target)?;
        }
        fs::rename(&tmp, &target)?;
        Ok(target)
    }

    /// Write the full training state into `dir` (created).
    pub fn write_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, store) in self.nets.stores() {
            let file = if name == "s" { SEGMENTER_WEIGHTS.to_string() } else { format!("{name}.safetensors") };
            store.save(&dir.join(file))?;
        }
        let mut optim = self.opt_gs.state("gs")?;
        optim.extend(self.opt_d_img.state("d_img")?);
        optim.extend(self.opt_d_seg.state("d_seg")?);
        candle_core::safetensors::save(&optim, dir.join("optim.safetensors"))?;
        let mut pools = self.pool_img.state("pool_img");
        pools.extend(self.pool_seg.state("pool_seg"));
        pools.insert("marker".into(), Tensor::zeros(1, DType::F32, &Device::Cpu)?);
        candle_core::safetensors::save(&pools, dir.join("pools.safetensors"))?;
        let state = CheckpointState {
            step: self.step,
            epoch: self.epoch(),
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            perlin: self.stream.perlin_config().clone(),
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
        let export = SegmenterExport {
            spec: *self.nets.s.spec(),
            step: self.step,
            epoch: self.epoch(),
            config_hash: state.config_hash.clone(),
        };
        fs::write(dir.join(SEGMENTER_META), serde_json::to_string_pretty(&export)?)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint directory. The training images
    /// must be the same as in the original run.
    pub fn resume(checkpoint: &Path, images: Vec<IntensityImage>, device: &Device) -> Result<Self> {
        let state: CheckpointState = serde_json::from_slice(&fs::read(checkpoint.join("state.json"))?)?;
        if state.config.hash() != state.config_hash {
            return Err(Error::Checkpoint("configuration hash mismatch".into()));
        }
        let mut t = Self::build(state.config.clone(), images, device, state.perlin.clone())?;
        for (name, store) in t.nets.stores() {
            let file = if name == "s" { SEGMENTER_WEIGHTS.to_string() } else { format!("{name}.safetensors") };
            store.load(&checkpoint.join(file))?;
        }
        let optim = candle_core::safetensors::load(checkpoint.join("optim.safetensors"), device)?;
        t.opt_gs.load_state("gs", &optim)?;
        t.opt_d_img.load_state("d_img", &optim)?;
        t.opt_d_seg.load_state("d_seg", &optim)?;
        let pools = candle_core::safetensors::load(checkpoint.join("pools.safetensors"), device)?;
        t.pool_img.load_state("pool_img", &pools)?;
        t.pool_seg.load_state("pool_seg", &pools)?;
        t.step = state.step;
        Ok(t)
    }

    /// Export the segmenter weights and spec into `dir`.
    pub fn export_segmenter(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.nets.s.store().save(&dir.join(SEGMENTER_WEIGHTS))?;
        let export = SegmenterExport {
            spec: *self.nets.s.spec(),
            step: self.step,
            epoch: self.epoch(),
            config_hash: self.cfg.hash(),
        };
        fs::write(dir.join(SEGMENTER_META), serde_json::to_string_pretty(&export)?)?;
        Ok(())
    }
}

fn pool_batch<R: rand::Rng>(pool: &mut ImagePool, fakes: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = fakes.dim(0)?;
    let items = (0..n)
        .map(|i| Ok(pool.query(&fakes.narrow(0, i, 1)?, rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&items, 0)?)
}

fn append_csv(path: &Path, record: &LossRecord) -> Result<()> {
    let exists = path.exists() && fs::metadata(path)?.len() > 0;
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    w.serialize(record)?;
    w.flush()?;
    Ok(())
}

/// Load an exported segmenter from a directory holding
/// `segmenter.safetensors` and `segmenter.json`, or from the weights file
/// itself (with the JSON next to it).
pub fn load_segmenter(path: &Path, device: &Device) -> Result<(Segmenter, SegmenterExport)> {
    let (weights, meta) = if path.is_dir() {
        (path.join(SEGMENTER_WEIGHTS), path.join(SEGMENTER_META))
    } else {
        (path.to_path_buf(), path.with_extension("json"))
    };
    let export: SegmenterExport = serde_json::from_slice(
        &fs::read(&meta).map_err(|e| Error::Checkpoint(format!("{}: {e}", meta.display())))?,
    )?;
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(&weights, device)?;
    let dtype = tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
    let s = Segmenter::new(export.spec, device, dtype, 0)?;
    s.store().assign(&tensors)?;
    s.store().set_training(false);
    Ok((s, export))
}
