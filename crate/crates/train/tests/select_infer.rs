mod common;

use cyclepose_core::augment::dihedral;
use cyclepose_core::{encode_flows, FlowTarget, InstanceMask, IntensityImage};
use cyclepose_train::infer::{predict_tiled, FlowPredictor, InferConfig, Predictor, TileConfig};
use cyclepose_train::select::{dihedral_expand, select_model, Candidate};
use cyclepose_train::{InstanceSegmenter, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Non-overlapping disks with at least `gap` pixels between them.
fn scattered_disks(h: usize, w: usize, n: usize, radius: usize, seed: u64) -> (IntensityImage, InstanceMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<(usize, usize)> = Vec::new();
    let min_d = (2 * radius + 4) as f64;
    while centers.len() < n {
        let c = (rng.random_range(radius + 1..h - radius - 1), rng.random_range(radius + 1..w - radius - 1));
        if centers.iter().all(|&(y, x)| (((y as f64 - c.0 as f64).powi(2) + (x as f64 - c.1 as f64).powi(2)).sqrt()) > min_d) {
            centers.push(c);
        }
    }
    let r2 = (radius * radius) as isize;
    let labels = Array2::from_shape_fn((h, w), |(y, x)| {
        centers
            .iter()
            .position(|&(cy, cx)| (y as isize - cy as isize).pow(2) + (x as isize - cx as isize).pow(2) <= r2)
            .map_or(0, |i| i as u32 + 1)
    });
    (labels.mapv(|l| if l > 0 { 0.9 } else { 0.1 }), InstanceMask::new(labels))
}

/// 4-connected components of `img > 0`.
fn components(img: &IntensityImage) -> InstanceMask {
    let (h, w) = img.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0;
    for sy in 0..h {
        for sx in 0..w {
            if img[[sy, sx]] <= 0.0 || labels[[sy, sx]] != 0 {
                continue;
            }
            next += 1;
            let mut stack = vec![(sy, sx)];
            labels[[sy, sx]] = next;
            while let Some((y, x)) = stack.pop() {
                let nb = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                for (ny, nx) in nb {
                    if ny < h && nx < w && img[[ny, nx]] > 0.0 && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = next;
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }
    InstanceMask::new(labels)
}

/// Ideal flow predictor: labels bright blobs and encodes their flows.
struct Oracle;

impl FlowPredictor for Oracle {
    fn predict(&self, image: &IntensityImage) -> Result<FlowTarget> {
        Ok(encode_flows(&components(image)))
    }
}

#[test]
fn tiled_and_whole_inference_agree_on_instance_count() {
    for seed in 0..3 {
        let (img, gt) = scattered_disks(480, 400, 40, 9, seed);
        let signed = img.mapv(|v| 2.0 * v - 1.0);
        let tile = TileConfig { size: 224, overlap: 64 };
        let cfg = InferConfig::default();
        let whole = cyclepose_core::decode_flows(&Oracle.predict(&signed).unwrap(), &cfg.decode);
        let tiled = cyclepose_core::decode_flows(&predict_tiled(&Oracle, &signed, &tile).unwrap(), &cfg.decode);
        let (a, b) = (whole.instance_count() as f64, tiled.instance_count() as f64);
        assert_eq!(whole.instance_count(), gt.instance_count());
        assert!((b - a).abs() <= 0.05 * a, "seed {seed}: whole {a} vs tiled {b}");
    }
}

#[test]
fn predictor_output_is_compact_and_blank_is_empty() {
    let (img, gt) = scattered_disks(128, 128, 6, 8, 7);
    let p = Predictor::new(Oracle, InferConfig::default());
    let out = p.infer(&img.mapv(|v| v * 4000.0 + 100.0)).unwrap();
    assert!(out.is_compact());
    assert_eq!(out.instance_count(), gt.instance_count());
    let blank = p.infer(&Array2::from_elem((64, 64), 500.0)).unwrap();
    assert_eq!(blank.instance_count(), 0);
}

/// Returns the reference mask restricted to its first `keep` labels, so the
/// pooled Jaccard index is exactly `keep / instances`.
struct Partial {
    table: Vec<(IntensityImage, InstanceMask)>,
    keep: u32,
}

impl InstanceSegmenter for Partial {
    fn segment(&self, image: &IntensityImage) -> Result<InstanceMask> {
        let (_, gt) = self.table.iter().find(|(img, _)| img == image).expect("known image");
        Ok(InstanceMask::new(gt.labels().mapv(|l| if l <= self.keep { l } else { 0 })).compact())
    }
}

fn val_pairs(n: usize) -> Vec<(IntensityImage, InstanceMask)> {
    (0..n)
        .map(|i| {
            let (img, m) = scattered_disks(64, 64, 10, 4, 100 + i as u64);
            // Break the symmetry so every dihedral variant is a distinct image.
            let mut img = img;
            img[[0, 1]] = 0.5 + i as f32 * 0.01;
            (img, m)
        })
        .collect()
}

#[test]
fn selection_prefers_the_better_checkpoint() {
    let val = val_pairs(10);
    let table = dihedral_expand(&val);
    assert_eq!(table.len(), 80);
    let candidates = vec![
        Candidate { label: "a".into(), epoch: 5, segmenter: Partial { table: table.clone(), keep: 4 } },
        Candidate { label: "b".into(), epoch: 10, segmenter: Partial { table: table.clone(), keep: 6 } },
    ];
    let sel = select_model(&candidates, &val).unwrap();
    assert_eq!(sel.best, 1);
    assert_eq!(sel.evaluated_pairs, 80);
    assert!((sel.scores[0].jac_mean - 0.4).abs() < 1e-9, "{:?}", sel.scores);
    assert!((sel.scores[1].jac_mean - 0.6).abs() < 1e-9);

    // Ties go to the later epoch; a single candidate is returned as is.
    let tied = vec![
        Candidate { label: "early".into(), epoch: 5, segmenter: Partial { table: table.clone(), keep: 6 } },
        Candidate { label: "late".into(), epoch: 10, segmenter: Partial { table: table.clone(), keep: 6 } },
    ];
    assert_eq!(select_model(&tied, &val).unwrap().best, 1);
    let single = vec![Candidate { label: "only".into(), epoch: 1, segmenter: Partial { table, keep: 0 } }];
    assert_eq!(select_model(&single, &val).unwrap().best, 0);
}

#[test]
fn selection_rejects_empty_inputs() {
    let val = val_pairs(1);
    let table = dihedral_expand(&val);
    let c = vec![Candidate { label: "a".into(), epoch: 0, segmenter: Partial { table, keep: 1 } }];
    assert!(select_model(&c, &[]).is_err());
    let none: Vec<Candidate<Partial>> = Vec::new();
    assert!(select_model(&none, &val).is_err());
}

#[test]
fn dihedral_expansion_keeps_pairs_aligned() {
    let val = val_pairs(2);
    let exp = dihedral_expand(&val);
    assert_eq!(exp.len(), 16);
    for (k, (img, m)) in exp[..8].iter().enumerate() {
        assert_eq!(img, &dihedral(&val[0].0, k));
        // Bright pixels coincide with the foreground in every variant.
        let fg = m.foreground();
        assert!(img.indexed_iter().all(|(ix, &v)| (v > 0.85) == fg[ix]));
    }
}
