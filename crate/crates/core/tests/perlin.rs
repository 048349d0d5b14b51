use cyclepose_core::filters::otsu_threshold;
use cyclepose_core::perlin::{fractal_perlin, poisson_sample, render_perlin_image, PerlinConfig};
use cyclepose_core::synthmask::{synthesize_mask, DeformConfig, EllipseConfig};
use cyclepose_core::InstanceMask;
use ndarray::Array2;
use rand::SeedableRng;
use rustfft::{num_complex::Complex, FftPlanner};

/// Mean squared FFT magnitude over frequencies with radius above `cutoff`
/// (cycles/pixel), after mean removal.
fn high_band_energy(img: &Array2<f32>, cutoff: f64) -> f64 {
    let (h, w) = img.dim();
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
    let mut data: Vec<Complex<f64>> = img.iter().map(|&v| Complex::new(v as f64 - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    for x in 0..w {
        let mut c: Vec<Complex<f64>> = (0..h).map(|y| data[y * w + x]).collect();
        col.process(&mut c);
        for y in 0..h {
            data[y * w + x] = c[y];
        }
    }
    let freq = |i: usize, n: usize| {
        let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        k / n as f64
    };
    let (mut energy, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let r = (freq(y, h).powi(2) + freq(x, w).powi(2)).sqrt();
            if r > cutoff {
                energy += data[y * w + x].norm_sqr();
                count += 1;
            }
        }
    }
    energy / count as f64
}

#[test]
fn more_octaves_add_high_frequency_energy() {
    let nyquist_quarter = 0.5 / 4.0;
    for seed in 0..3 {
        let mut last = 0.0;
        for octaves in [2, 4, 8] {
            let cfg = PerlinConfig { octaves, ..Default::default() };
            let img = fractal_perlin((256, 256), &cfg, seed).unwrap();
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            let e = high_band_energy(&img, nyquist_quarter);
            if octaves > 2 {
                assert!(e > last, "seed {seed}: octaves {octaves} energy {e} <= {last}");
            }
            last = e;
        }
    }
}

fn synth_mask(seed: u64) -> InstanceMask {
    let cfg = EllipseConfig { canvas_size: (96, 96), count_range: (4, 10), ..Default::default() };
    synthesize_mask(&cfg, &DeformConfig::default(), seed).unwrap()
}

#[test]
fn foreground_brighter_than_background() {
    let cfg = PerlinConfig::default();
    for seed in 0..100 {
        let m = synth_mask(seed);
        if m.instance_count() == 0 {
            continue;
        }
        let img = render_perlin_image(&m, &cfg, seed).unwrap();
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
        for (&l, &v) in m.labels().iter().zip(img.iter()) {
            if l != 0 {
                fg += v as f64;
                nf += 1;
            } else {
                bg += v as f64;
                nb += 1;
            }
        }
        assert!(fg / nf as f64 > bg / nb as f64, "seed {seed}");
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn empty_mask_renders_background_band() {
    let cfg = PerlinConfig { blur_sigma: 0.0, poisson_scale: f64::INFINITY, ..Default::default() };
    let img = render_perlin_image(&InstanceMask::zeros(64, 64), &cfg, 7).unwrap();
    let lo = cfg.bg_intensity_range.0 - cfg.bg_texture_amplitude;
    let hi = cfg.bg_intensity_range.1 + cfg.bg_texture_amplitude;
    assert!(img.iter().all(|&v| (v as f64) >= lo - 1e-6 && (v as f64) <= hi + 1e-6));
}

#[test]
fn poisson_variance_matches_mean_over_scale() {
    let scale = 200.0;
    for value in [0.1, 0.5, 0.9] {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<f64> = (0..10_000).map(|_| poisson_sample(value, scale, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let expect = mean / scale;
        assert!((var - expect).abs() <= 0.1 * expect, "value {value}: var {var} vs {expect}");
    }
}

#[test]
fn otsu_recovers_foreground() {
    for blur in [0.0, 1.0, 2.0] {
        let cfg = PerlinConfig { blur_sigma: blur, ..Default::default() };
        for seed in 0..20 {
            let m = synth_mask(100 + seed);
            if m.instance_count() == 0 {
                continue;
            }
            let img = render_perlin_image(&m, &cfg, seed).unwrap();
            let t = otsu_threshold(&img);
            let (mut inter, mut union) = (0usize, 0usize);
            for (&l, &v) in m.labels().iter().zip(img.iter()) {
                let (a, b) = (l != 0, v > t);
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            let iou = inter as f64 / union as f64;
            assert!(iou >= 0.7, "blur {blur} seed {seed}: IoU {iou:.3}");
        }
    }
}

#[test]
fn rendering_is_deterministic() {
    let m = synth_mask(3);
    let cfg = PerlinConfig::default();
    assert_eq!(render_perlin_image(&m, &cfg, 9).unwrap(), render_perlin_image(&m, &cfg, 9).unwrap());
}
