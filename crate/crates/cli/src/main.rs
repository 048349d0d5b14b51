mod run;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cyclepose_core::io::{list_images, read_gray_image, read_mask, write_flows_tiff, write_image_png, write_mask_png};
use cyclepose_core::metrics::{jaccard_sweep, Aggregation};
use cyclepose_core::rng::{derive_seed, rng_for};
use cyclepose_core::synthmask::synthesize_mask;
use cyclepose_core::{encode_flows, render_perlin_image, PerlinConfig};
use cyclepose_train::TileConfig;
use rand::Rng;
use serde::Serialize;

use run::RunFile;

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (",
    env!("CARGO_PKG_NAME"),
    "; candle cpu backend)"
);

#[derive(Parser)]
#[command(name = "cyclepose", version, long_version = LONG_VERSION)]
#[command(about = "Annotation-free nuclei instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    Pooled,
    PerImage,
}

impl From<Agg> for Aggregation {
    fn from(a: Agg) -> Self {
        match a {
            Agg::Pooled => Aggregation::Pooled,
            Agg::PerImage => Aggregation::PerImage,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic (mask, Perlin image, flow field) triples.
    Synth {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Canvas side in pixels (defaults to the configured crop).
        #[arg(long)]
        size: Option<usize>,
        /// Run file whose ellipse/deformation/Perlin settings are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train generator, segmenter and discriminators on unlabeled images.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest (overrides the one named in the run file).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Loss families to switch off, e.g. `adv,perlin`.
        #[arg(long)]
        ablate: Option<String>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment every image of a folder with an exported segmenter.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Predict on overlapping tiles of this side instead of the whole image.
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long, default_value_t = 64)]
        tile_overlap: usize,
    },
    /// Compare predicted label images against ground truth (matched by file stem).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Directory for `metrics.json` and `per_image.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Agg::Pooled)]
        aggregation: Agg,
    },
    /// Pick the best checkpoint on the annotated validation subset.
    Select {
        /// A run directory, or a directory of run directories.
        #[arg(long)]
        runs: PathBuf,
        /// Dataset manifest providing the validation split.
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where the chosen segmenter is exported (default `<runs>/selected`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, select and test one run per (arm, seed) and summarize.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Arms: `full` or a comma list of switched-off families; separate arms with `;`.
        #[arg(long, default_value = "full;perlin;m2i;adv")]
        arms: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { n, out, seed, size, config } => synth(n, &out, seed, size, config.as_deref()),
        Command::Train { config, data, out, seed, ablate, resume } => {
            let run = RunFile::load(config.as_deref())?;
            let cfg = train_config(&run, seed, ablate.as_deref())?;
            let dataset = run::load_dataset(&dataset_path(&run, data)?)?;
            let t = run::train(cfg, &dataset, &out, resume.as_deref())?;
            println!("trained {} steps; checkpoints in {}", t.step(), out.join("checkpoints").display());
            Ok(())
        }
        Command::Infer { weights, input, out, config, tile, tile_overlap } => {
            let mut infer = RunFile::load(config.as_deref())?.infer;
            if let Some(size) = tile {
                infer.tile = Some(TileConfig { size, overlap: tile_overlap });
            }
            infer_dir(&weights, &input, &out, &infer)
        }
        Command::Eval { pred, gt, out, aggregation } => eval(&pred, &gt, out.as_deref(), aggregation.into()),
        Command::Select { runs, val, config, out } => {
            let run = RunFile::load(config.as_deref())?;
            let dataset = run::load_dataset(&val)?;
            let ckpts = run::collect_checkpoints(&runs)?;
            let sel = run::select(&ckpts, &dataset, &run.infer)?;
            let out = out.unwrap_or_else(|| runs.join("selected"));
            run::export_checkpoint(&sel.checkpoint, &out)?;
            run::write_json(&out.join("selection.json"), &sel.selection)?;
            let best = &sel.selection.scores[sel.selection.best];
            println!(
                "selected {} (epoch {}, JAC 0.5:0.95 {:.4} on {} pairs) -> {}",
                best.label,
                best.epoch,
                best.jac_mean,
                sel.selection.evaluated_pairs,
                out.display()
            );
            Ok(())
        }
        Command::Ablate { config, data, out, arms, seeds } => ablate(config.as_deref(), data, &out, &arms, seeds),
    }
}

fn train_config(run: &RunFile, seed: Option<u64>, ablate: Option<&str>) -> Result<cyclepose_train::TrainConfig> {
    let mut cfg = run.train.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(list) = ablate {
        cfg.terms = cfg.terms.ablate(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_path(run: &RunFile, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| run.dataset.clone())
        .context("no dataset manifest: pass --data or set `dataset` in the run file")
}

fn synth(n: usize, out: &Path, seed: u64, size: Option<usize>, config: Option<&Path>) -> Result<()> {
    let mut cfg = RunFile::load(config)?.train;
    if let Some(s) = size {
        cfg.crop = s;
        cfg.augment.crop = s;
    }
    let ellipse = cfg.ellipse_config();
    ellipse.validate()?;
    cfg.deform.validate((cfg.crop, cfg.crop))?;
    let dirs = ["masks", "images", "flows"].map(|d| out.join(d));
    for d in &dirs {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    for i in 0..n {
        let s = derive_seed(seed, i as u64);
        let mask = synthesize_mask(&ellipse, &cfg.deform, derive_seed(s, 1))?;
        let (lo, hi) = cfg.perlin_blur_range;
        let blur_sigma = if hi > lo { rng_for(s, 2).random_range(lo..=hi) } else { lo };
        let perlin = PerlinConfig { blur_sigma, ..cfg.perlin.clone() };
        let image = render_perlin_image(&mask, &perlin, derive_seed(s, 3))?;
        let name = format!("synth_{i:05}");
        write_mask_png(&dirs[0].join(format!("{name}.png")), &mask)?;
        write_image_png(&dirs[1].join(format!("{name}.png")), &image, 16)?;
        write_flows_tiff(&dirs[2].join(format!("{name}.tif")), &encode_flows(&mask))?;
    }
    println!("wrote {n} triples to {}", out.display());
    Ok(())
}

fn infer_dir(weights: &Path, input: &Path, out: &Path, infer: &cyclepose_train::InferConfig) -> Result<()> {
    let (model, _) = run::load_model(weights, infer)?;
    let files = list_images(input)?;
    if files.is_empty() {
        bail!("no PNG/TIFF images in {}", input.display());
    }
    fs::create_dir_all(out)?;
    for f in &files {
        let img = read_gray_image(f, true)?;
        let mask = model.infer(&img).with_context(|| format!("segmenting {}", f.display()))?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        write_mask_png(&out.join(format!("{stem}.png")), &mask)?;
        log::info!("{}: {} instances", f.display(), mask.max_label());
    }
    println!("segmented {} images into {}", files.len(), out.display());
    Ok(())
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?
        .into_iter()
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p.clone())))
        .collect())
}

#[derive(Serialize)]
struct PerImage {
    id: String,
    pred_instances: u32,
    gt_instances: u32,
    jac_50: f64,
    jac_mean: f64,
    pq_50: f64,
    pq_mean: f64,
}

fn eval(pred: &Path, gt: &Path, out: Option<&Path>, aggregation: Aggregation) -> Result<()> {
    let (pred, gt) = (stems(pred)?, stems(gt)?);
    if gt.is_empty() {
        bail!("no ground-truth masks found");
    }
    let mut pairs = Vec::with_capacity(gt.len());
    let mut rows = Vec::with_capacity(gt.len());
    for (id, g) in &gt {
        let p = pred.get(id).with_context(|| format!("no prediction for '{id}'"))?;
        let (p, g) = (read_mask(p, false)?, read_mask(g, false)?);
        let r = jaccard_sweep(&[(p.clone(), g.clone())], Aggregation::Pooled)?;
        rows.push(PerImage {
            id: id.clone(),
            pred_instances: p.compact().max_label(),
            gt_instances: g.compact().max_label(),
            jac_50: r.jac_50,
            jac_mean: r.jac_mean,
            pq_50: r.pq_50,
            pq_mean: r.pq_mean,
        });
        pairs.push((p, g));
    }
    for id in pred.keys().filter(|k| !gt.contains_key(*k)) {
        log::warn!("prediction '{id}' has no ground truth; ignored");
    }
    let agg = jaccard_sweep(&pairs, aggregation)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("per_image.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        run::write_json(
            &dir.join("metrics.json"),
            &serde_json::json!({ "images": pairs.len(), "aggregation": aggregation, "metrics": agg }),
        )?;
    }
    println!(
        "{} images: JAC_0.5 {:.4}  JAC_0.5:0.95 {:.4}  PQ_0.5 {:.4}  PQ_0.5:0.95 {:.4}",
        pairs.len(),
        agg.jac_50,
        agg.jac_mean,
        agg.pq_50,
        agg.pq_mean
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    arm: String,
    seed: u64,
    selected_epoch: usize,
    jac_50: f64,
    jac_mean: f64,
    pq_50: f64,
    pq_mean: f64,
}

fn ablate(config: Option<&Path>, data: Option<PathBuf>, out: &Path, arms: &str, seeds: u64) -> Result<()> {
    let run = RunFile::load(config)?;
    let dataset = run::load_dataset(&dataset_path(&run, data)?)?;
    let arms: Vec<&str> = arms.split(';').map(str::trim).filter(|a| !a.is_empty()).collect();
    if arms.is_empty() || seeds == 0 {
        bail!("need at least one arm and one seed");
    }
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    let mut by_arm: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &arm in &arms {
        let switched_off = if arm == "full" { None } else { Some(arm) };
        for seed in 0..seeds {
            let cfg = train_config(&run, Some(seed), switched_off)?;
            let dir = out.join(format!("{}_seed{seed}", arm.replace(',', "+")));
            run::train(cfg, &dataset, &dir, None)?;
            let sel = run::select(&run::collect_checkpoints(&dir)?, &dataset, &run.infer)?;
            let m = run::test_metrics(&sel.model, &dataset, Aggregation::Pooled)?;
            run::write_json(&dir.join("metrics.json"), &m)?;
            let row = AblationRow {
                arm: arm.to_string(),
                seed,
                selected_epoch: sel.selection.scores[sel.selection.best].epoch,
                jac_50: m.jac_50,
                jac_mean: m.jac_mean,
                pq_50: m.pq_50,
                pq_mean: m.pq_mean,
            };
            w.serialize(&row)?;
            w.flush()?;
            by_arm.entry(arm).or_default().push(m.jac_mean);
        }
    }
    for (arm, v) in &by_arm {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        println!("{arm}: JAC_0.5:0.95 {mean:.4} ± {sd:.4} over {} seeds", v.len());
    }
    Ok(())
}
