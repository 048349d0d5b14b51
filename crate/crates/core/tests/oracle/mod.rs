//! Exhaustive reference matcher and random label maps, shared by the
//! metric tests and the acceptance run.
#![allow(dead_code)]

use cyclepose_core::InstanceMask;
use ndarray::Array2;
use rand::Rng;

/// Random label map of up to `max_inst` axis-aligned boxes drawn in order.
pub fn random_map<R: Rng>(rng: &mut R, n: usize, max_inst: u32) -> InstanceMask {
    let mut labels = Array2::<u32>::zeros((n, n));
    let k = rng.random_range(0..=max_inst);
    for l in 1..=k {
        let (y0, x0) = (rng.random_range(0..n - 4), rng.random_range(0..n - 4));
        let (hh, ww) = (rng.random_range(3..12), rng.random_range(3..12));
        for y in y0..(y0 + hh).min(n) {
            for x in x0..(x0 + ww).min(n) {
                labels[[y, x]] = l;
            }
        }
    }
    InstanceMask::new(labels)
}

/// Perturbed copy: every instance shifted by up to two pixels.
pub fn perturb<R: Rng>(rng: &mut R, m: &InstanceMask) -> InstanceMask {
    let n = m.height();
    let mut out = Array2::<u32>::zeros((n, n));
    for (l, px) in m.instance_pixels() {
        let (dy, dx) = (rng.random_range(-2i64..=2), rng.random_range(-2i64..=2));
        for (y, x) in px {
            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
            if (0..n as i64).contains(&yy) && (0..n as i64).contains(&xx) {
                out[[yy as usize, xx as usize]] = l;
            }
        }
    }
    InstanceMask::new(out)
}

pub struct Brute {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ious: Vec<f64>,
}

pub fn labels_of(m: &InstanceMask) -> Vec<u32> {
    let mut v: Vec<u32> = m.labels().iter().copied().filter(|&l| l != 0).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Exhaustive search over all partial one-to-one assignments, maximizing the
/// number of matches and then the total IoU.
pub fn brute_force(pred: &InstanceMask, gt: &InstanceMask, tau: f64) -> Brute {
    let pl = labels_of(pred);
    let gl = labels_of(gt);
    let iou = |p: u32, g: u32| {
        let (mut i, mut u) = (0usize, 0usize);
        for (&a, &b) in pred.labels().iter().zip(gt.labels().iter()) {
            i += usize::from(a == p && b == g);
            u += usize::from(a == p || b == g);
        }
        i as f64 / u as f64
    };
    let m: Vec<Vec<f64>> = pl.iter().map(|&p| gl.iter().map(|&g| iou(p, g)).collect()).collect();

    fn search(i: usize, m: &[Vec<f64>], tau: f64, used: &mut Vec<bool>, cur: &mut Vec<f64>, best: &mut (usize, f64, Vec<f64>)) {
        if i == m.len() {
            let total: f64 = cur.iter().sum();
            if cur.len() > best.0 || (cur.len() == best.0 && total > best.1 + 1e-15) {
                *best = (cur.len(), total, cur.clone());
            }
            return;
        }
        search(i + 1, m, tau, used, cur, best);
        for g in 0..used.len() {
            if !used[g] && m[i][g] > tau {
                used[g] = true;
                cur.push(m[i][g]);
                search(i + 1, m, tau, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut best = (0, 0.0, Vec::new());
    search(0, &m, tau, &mut vec![false; gl.len()], &mut Vec::new(), &mut best);
    let mut ious = best.2;
    ious.sort_by(f64::total_cmp);
    Brute {
        tp: best.0,
        fp: pl.len() - best.0,
        fn_: gl.len() - best.0,
        ious,
    }
}
