#![allow(dead_code)]

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use cyclepose_core::dataset::{ingest, DatasetManifest, Split};
use cyclepose_core::io::{write_image_png, write_mask_png};
use cyclepose_core::metrics::Aggregation;
use cyclepose_core::{EllipseConfig, InstanceMask, IntensityImage};
use cyclepose_train::engine::{load_segmenter, objective, Networks};
use cyclepose_train::losses::{image_extrema, scalar};
use cyclepose_train::nets::{DiscriminatorSpec, GeneratorSpec, SegmenterSpec};
use cyclepose_train::select::{checkpoint_dirs, evaluate, select_model, Candidate};
use cyclepose_train::{InferConfig, Predictor, Terms, TrainConfig, Trainer};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Narrow networks on small crops so training fits a CPU test budget.
pub fn small_config(crop: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        crop,
        epochs_const: 10,
        epochs_decay: 3,
        generator: GeneratorSpec { base_width: 8, residual_blocks: 2, ..Default::default() },
        segmenter: SegmenterSpec { base_width: 8, ..Default::default() },
        discriminator: DiscriminatorSpec { base_width: 8, ..Default::default() },
        ellipse: EllipseConfig { count_range: (3, 12), major_axis_range: (6, 24), ..Default::default() },
        ..Default::default()
    };
    cfg.augment.crop = crop;
    cfg.augment.translation_px = 8.0;
    cfg
}

/// Stand-in "real" microscopy: blurred bright blobs on a dim noisy
/// background, in `[0, 1]`.
pub fn blob_image(side: usize, seed: u64) -> IntensityImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f32, f32, f32, f32)> = (0..rng.random_range(6..14))
        .map(|_| {
            (
                rng.random_range(0.0..side as f32),
                rng.random_range(0.0..side as f32),
                rng.random_range(3.0..9.0),
                rng.random_range(0.5..0.9),
            )
        })
        .collect();
    let mut img = Array2::from_shape_fn((side, side), |(y, x)| {
        let mut v = 0.08f32;
        for &(cy, cx, r, a) in &blobs {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            v += a * (-(d2 / (r * r)).powi(2)).exp();
        }
        v
    });
    img.mapv_inplace(|v| (v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0));
    img
}

pub fn blob_images(n: usize, side: usize, seed: u64) -> Vec<IntensityImage> {
    (0..n).map(|i| blob_image(side, seed.wrapping_mul(1000) + i as u64)).collect()
}

/// Well-separated disks and a matching bright-disk image.
pub fn disks(side: usize, centers: &[(usize, usize)], radius: usize) -> (IntensityImage, InstanceMask) {
    let r2 = (radius * radius) as isize;
    let labels = Array2::from_shape_fn((side, side), |(y, x)| {
        centers
            .iter()
            .position(|&(cy, cx)| {
                let (dy, dx) = (y as isize - cy as isize, x as isize - cx as isize);
                dy * dy + dx * dx <= r2
            })
            .map_or(0, |i| i as u32 + 1)
    });
    let img = labels.mapv(|l| if l > 0 { 0.9 } else { 0.1 });
    (img, InstanceMask::new(labels))
}

/// Exponential moving average with factor `alpha`.
pub fn ema(values: impl IntoIterator<Item = f64>, alpha: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut acc: Option<f64> = None;
    for v in values {
        let next = acc.map_or(v, |a| alpha * v + (1.0 - alpha) * a);
        acc = Some(next);
        out.push(next);
    }
    out
}

pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub autodiff: f64,
    pub numeric: f64,
    pub rel: f64,
}

fn element(t: &Tensor, i: usize) -> f64 {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[i]
}

fn with_element(var: &Var, i: usize, value: f64) {
    let shape = var.as_tensor().shape().clone();
    let mut v: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    v[i] = value;
    var.set(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap();
}

/// Autodiff against central finite differences on the complete
/// generator/segmenter objective of one 64×64 batch, in double precision.
/// Returns `(generator samples, segmenter samples)`.
pub fn gradient_check() -> (Vec<GradSample>, Vec<GradSample>) {
    let mut cfg = small_config(64, 11);
    cfg.f64 = true;
    cfg.generator = GeneratorSpec { base_width: 4, residual_blocks: 1, ..Default::default() };
    cfg.segmenter = SegmenterSpec { base_width: 4, ..Default::default() };
    cfg.discriminator = DiscriminatorSpec { base_width: 4, ..Default::default() };
    let trainer = Trainer::new(cfg.clone(), blob_images(2, 64, 11), &Device::Cpu).unwrap();
    let nets: &Networks = trainer.networks();
    nets.focus_generators(true);
    let batch = trainer.batch(0).unwrap();
    // The mask-to-image thresholds follow the image extrema, which are
    // treated as constants; pin them at the base point.
    let extrema = image_extrema(&nets.g.forward(&batch.flows).unwrap()).unwrap();
    let total = || {
        let o = objective(nets, &batch, Terms::default(), &cfg.weights, Some(&extrema)).unwrap();
        scalar(&o.total).unwrap()
    };
    let obj = objective(nets, &batch, Terms::default(), &cfg.weights, Some(&extrema)).unwrap();
    assert_eq!(
        [&obj.adv_g, &obj.adv_s, &obj.cyc_g, &obj.cyc_s, &obj.perlin, &obj.m2i].iter().filter(|t| t.is_some()).count(),
        6,
        "the full objective has six terms"
    );
    let grads = obj.total.backward().unwrap();

    let mut out = (Vec::new(), Vec::new());
    for (net, store) in [nets.g.store(), nets.s.store()].into_iter().enumerate() {
        // Biases feeding a normalization have an identically zero gradient;
        // sample convolution weights: the first, a middle and the last tensor.
        let mut names: Vec<&String> =
            store.vars().map(|(k, _)| k).filter(|k| k.ends_with("weight") && !k.contains(".bn.")).collect();
        names.sort();
        for name in [names[0], names[names.len() / 2], names[names.len() - 1]] {
            let var = store.vars().find(|(k, _)| *k == name).unwrap().1.clone();
            let gv: Vec<f64> = grads.get(var.as_tensor()).expect("gradient present").flatten_all().unwrap().to_vec1().unwrap();
            let i = (0..gv.len()).max_by(|&a, &b| gv[a].abs().total_cmp(&gv[b].abs())).unwrap();
            let x0 = element(var.as_tensor(), i);
            let h = 1e-6 * x0.abs().max(1.0);
            with_element(&var, i, x0 + h);
            let up = total();
            with_element(&var, i, x0 - h);
            let down = total();
            with_element(&var, i, x0);
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - gv[i]).abs() / numeric.abs().max(gv[i].abs()).max(1e-8);
            let sample = GradSample { name: name.clone(), index: i, autodiff: gv[i], numeric, rel };
            if net == 0 { out.0.push(sample) } else { out.1.push(sample) }
        }
    }
    out
}

pub struct UnsupervisedReport {
    pub train_entries_with_masks: usize,
    pub train_annotations_refused: bool,
    pub steps: usize,
    pub checkpoints: usize,
    pub evaluated_pairs: usize,
    pub val_jac_mean: f64,
    pub test_jac_50: f64,
    pub test_jac_mean: f64,
}

/// Train on an on-disk dataset whose training images have no masks, then
/// select among the checkpoints on 10 annotated validation pairs and
/// evaluate the pick on the test split.
pub fn unsupervised_run(root: &Path) -> UnsupervisedReport {
    let (images, masks) = (root.join("images"), root.join("masks"));
    fs::create_dir_all(&images).unwrap();
    fs::create_dir_all(&masks).unwrap();
    let name = |i: usize| format!("img{i:02}");
    for i in 0..4 {
        write_image_png(&images.join(format!("{}.png", name(i))), &blob_image(80, 300 + i as u64), 16).unwrap();
    }
    // Annotated evaluation images: only these have masks on disk.
    let centers = [(16, 16), (16, 48), (48, 16), (48, 48), (32, 32)];
    for i in 4..16 {
        let (img, mask) = disks(64, &centers[..1 + i % 5], 6);
        write_image_png(&images.join(format!("{}.png", name(i))), &img, 16).unwrap();
        write_mask_png(&masks.join(format!("{}.png", name(i))), &mask).unwrap();
    }
    let list = |r: std::ops::Range<usize>| r.map(|i| format!("\"{}\"", name(i))).collect::<Vec<_>>().join(", ");
    let manifest = root.join("dataset.toml");
    fs::write(
        &manifest,
        format!(
            "name = \"toy\"\nimage_dir = \"images\"\nmask_dir = \"masks\"\n\n[splits]\ntrain = [{}]\nval = [{}]\ntest = [{}]\n",
            list(0..4),
            list(4..14),
            list(14..16)
        ),
    )
    .unwrap();
    let dataset = ingest(&DatasetManifest::load(&manifest).unwrap()).unwrap();

    let mut cfg = small_config(64, 31);
    cfg.epochs_const = 1;
    cfg.epochs_decay = 1;
    cfg.checkpoint_every = 1;
    let run = root.join("run");
    let mut trainer =
        Trainer::new(cfg, dataset.train_images().unwrap(), &Device::Cpu).unwrap().with_run_dir(&run).unwrap();
    trainer.run(None).unwrap();

    let val = dataset.labeled_pairs(Split::Val, Some(10)).unwrap();
    let candidates = checkpoint_dirs(&run)
        .unwrap()
        .into_iter()
        .map(|dir| {
            let (s, meta) = load_segmenter(&dir, &Device::Cpu).unwrap();
            Candidate { label: dir.display().to_string(), epoch: meta.epoch, segmenter: Predictor::new(s, InferConfig::default()) }
        })
        .collect::<Vec<_>>();
    let selection = select_model(&candidates, &val).unwrap();
    let best = &candidates[selection.best].segmenter;
    let test = dataset.labeled_pairs(Split::Test, None).unwrap();
    let sweep = evaluate(best, &test, Aggregation::Pooled).unwrap();
    UnsupervisedReport {
        train_entries_with_masks: dataset.split(Split::Train).filter(|e| e.mask.is_some()).count(),
        train_annotations_refused: dataset.labeled_pairs(Split::Train, None).is_err(),
        steps: trainer.step(),
        checkpoints: candidates.len(),
        evaluated_pairs: selection.evaluated_pairs,
        val_jac_mean: selection.scores[selection.best].jac_mean,
        test_jac_50: sweep.jac_50,
        test_jac_mean: sweep.jac_mean,
    }
}
