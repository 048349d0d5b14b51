//! Gradient-flow representation of instance masks.
//!
//! Encoding diffuses heat from a source pixel inside each instance and takes
//! the normalized spatial gradient of the (log) heat map, so every nucleus
//! pixel carries a unit vector pointing toward its instance center. Decoding
//! integrates those vectors and groups pixels whose trajectories end at the
//! same place.

use std::collections::HashMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::InstanceMask;

/// Three-channel flow field: `(flow_y, flow_x, prob)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTarget {
    pub flow_y: Array2<f32>,
    pub flow_x: Array2<f32>,
    pub prob: Array2<f32>,
}

impl FlowTarget {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            flow_y: Array2::zeros((height, width)),
            flow_x: Array2::zeros((height, width)),
            prob: Array2::zeros((height, width)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.prob.dim()
    }

    /// Channel-first stack `(3, H, W)` in the order `flow_y, flow_x, prob`.
    pub fn to_array(&self) -> Array3<f32> {
        ndarray::stack![
            ndarray::Axis(0),
            self.flow_y.view(),
            self.flow_x.view(),
            self.prob.view()
        ]
    }

    pub fn from_array(a: &Array3<f32>) -> Result<Self> {
        if a.dim().0 != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", a.dim().0)));
        }
        Ok(Self {
            flow_y: a.index_axis(ndarray::Axis(0), 0).to_owned(),
            flow_x: a.index_axis(ndarray::Axis(0), 1).to_owned(),
            prob: a.index_axis(ndarray::Axis(0), 2).to_owned(),
        })
    }
}

/// Heat source: per-axis median of the instance coordinates, snapped to the
/// nearest instance pixel.
pub fn instance_center(pixels: &[(usize, usize)]) -> (usize, usize) {
    let mut ys: Vec<usize> = pixels.iter().map(|p| p.0).collect();
    let mut xs: Vec<usize> = pixels.iter().map(|p| p.1).collect();
    ys.sort_unstable();
    xs.sort_unstable();
    let (my, mx) = (ys[ys.len() / 2] as f64, xs[xs.len() / 2] as f64);
    *pixels
        .iter()
        .min_by(|a, b| {
            let da = (a.0 as f64 - my).powi(2) + (a.1 as f64 - mx).powi(2);
            let db = (b.0 as f64 - my).powi(2) + (b.1 as f64 - mx).powi(2);
            da.total_cmp(&db)
        })
        .expect("instance has pixels")
}

/// Encode one instance into unit flow vectors written into `out_y`/`out_x`.
fn encode_instance(pixels: &[(usize, usize)], out_y: &mut Array2<f32>, out_x: &mut Array2<f32>) {
    if pixels.len() < 2 {
        return;
    }
    let y0 = pixels.iter().map(|p| p.0).min().unwrap();
    let y1 = pixels.iter().map(|p| p.0).max().unwrap();
    let x0 = pixels.iter().map(|p| p.1).min().unwrap();
    let x1 = pixels.iter().map(|p| p.1).max().unwrap();
    // Local grid with a one-pixel zero border.
    let (lh, lw) = (y1 - y0 + 3, x1 - x0 + 3);
    let local: Vec<(usize, usize)> = pixels.iter().map(|&(y, x)| (y - y0 + 1, x - x0 + 1)).collect();
    let (cy, cx) = instance_center(pixels);
    let src = (cy - y0 + 1, cx - x0 + 1);

    let diameter = (y1 - y0 + 1).max(x1 - x0 + 1);
    let iterations = 2 * diameter;
    let mut heat = Array2::<f64>::zeros((lh, lw));
    let mut next = heat.clone();
    for _ in 0..iterations {
        heat[src] += 1.0;
        for &(y, x) in &local {
            let mut s = 0.0;
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    s += heat[[yy, xx]];
                }
            }
            next[[y, x]] = s / 9.0;
        }
        std::mem::swap(&mut heat, &mut next);
    }
    heat.mapv_inplace(|v| (1.0 + v).ln());
    for (&(y, x), &(gy, gx)) in local.iter().zip(pixels) {
        let dy = heat[[y + 1, x]] - heat[[y - 1, x]];
        let dx = heat[[y, x + 1]] - heat[[y, x - 1]];
        let norm = (dy * dy + dx * dx).sqrt();
        if norm > 0.0 {
            out_y[[gy, gx]] = (dy / norm) as f32;
            out_x[[gy, gx]] = (dx / norm) as f32;
        }
    }
}

pub fn encode_flows(mask: &InstanceMask) -> FlowTarget {
    let (h, w) = mask.dim();
    let mut out = FlowTarget::zeros(h, w);
    for pixels in mask.instance_pixels().values() {
        encode_instance(pixels, &mut out.flow_y, &mut out.flow_x);
    }
    out.prob = mask.labels().mapv(|l| if l != 0 { 1.0 } else { 0.0 });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub prob_threshold: f32,
    pub min_size: usize,
    pub steps: usize,
    pub step_size: f32,
    /// Single-linkage radius for grouping trajectory end points.
    pub merge_radius: f32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            min_size: 15,
            steps: 200,
            step_size: 1.0,
            merge_radius: 2.5,
        }
    }
}

fn bilinear(field: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = field.dim();
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = field[[y0, x0]] * (1.0 - fx) + field[[y0, x1]] * fx;
    let bottom = field[[y1, x0]] * (1.0 - fx) + field[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Euler integration of the masked flow field from every foreground pixel.
/// Returns `(pixel, end point)` pairs in row-major pixel order.
pub fn follow_flows(
    flows: &FlowTarget,
    cfg: &DecodeConfig,
) -> Vec<((usize, usize), (f32, f32))> {
    let (h, w) = flows.dim();
    let fg = flows.prob.mapv(|p| p > cfg.prob_threshold);
    let fy = ndarray::Zip::from(&flows.flow_y).and(&fg).map_collect(|&v, &m| if m { v } else { 0.0 });
    let fx = ndarray::Zip::from(&flows.flow_x).and(&fg).map_collect(|&v, &m| if m { v } else { 0.0 });
    let (ymax, xmax) = ((h - 1) as f32, (w - 1) as f32);
    fg.indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((y, x), _)| {
            let (mut py, mut px) = (y as f32, x as f32);
            for _ in 0..cfg.steps {
                let vy = bilinear(&fy, py, px);
                let vx = bilinear(&fx, py, px);
                py = (py + cfg.step_size * vy).clamp(0.0, ymax);
                px = (px + cfg.step_size * vx).clamp(0.0, xmax);
            }
            ((y, x), (py, px))
        })
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage clustering of points at distance `radius`. Returns one
/// cluster index per point, numbered by first appearance.
pub fn cluster_points(points: &[(f32, f32)], radius: f32) -> Vec<usize> {
    // Fine buckets: every point in a bucket is within `radius` of the others.
    let cell = radius / 4.0;
    let key = |p: &(f32, f32)| ((p.0 / cell).floor() as i64, (p.1 / cell).floor() as i64);
    let mut bucket_of: HashMap<(i64, i64), usize> = HashMap::new();
    let mut buckets: Vec<((i64, i64), Vec<usize>)> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let k = key(p);
        let b = *bucket_of.entry(k).or_insert_with(|| {
            buckets.push((k, Vec::new()));
            buckets.len() - 1
        });
        buckets[b].1.push(i);
    }
    let mut uf = UnionFind::new(buckets.len());
    let reach = (radius / cell).ceil() as i64 + 1;
    let r2 = radius * radius;
    for b in 0..buckets.len() {
        let (k, ref members) = buckets[b];
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let Some(&o) = bucket_of.get(&(k.0 + dy, k.1 + dx)) else {
                    continue;
                };
                if o <= b || uf.find(o) == uf.find(b) {
                    continue;
                }
                let close = members.iter().any(|&i| {
                    buckets[o].1.iter().any(|&j| {
                        let (a, c) = (points[i], points[j]);
                        (a.0 - c.0).powi(2) + (a.1 - c.1).powi(2) <= r2
                    })
                });
                if close {
                    uf.union(b, o);
                }
            }
        }
    }
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let mut out = vec![0; points.len()];
    for (i, p) in points.iter().enumerate() {
        let root = uf.find(bucket_of[&key(p)]);
        let next = ids.len();
        out[i] = *ids.entry(root).or_insert(next);
    }
    out
}

/// Recover instances from a flow field whose `prob` channel holds
/// probabilities. Pixels below threshold are background; an all-background
/// field decodes to an empty mask.
pub fn decode_flows(flows: &FlowTarget, cfg: &DecodeConfig) -> InstanceMask {
    let (h, w) = flows.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let tracks = follow_flows(flows, cfg);
    if tracks.is_empty() {
        return InstanceMask::new(labels);
    }
    let ends: Vec<(f32, f32)> = tracks.iter().map(|t| t.1).collect();
    let clusters = cluster_points(&ends, cfg.merge_radius);
    for (((y, x), _), c) in tracks.iter().zip(clusters) {
        labels[[*y, *x]] = c as u32 + 1;
    }
    InstanceMask::new(labels).remove_small(cfg.min_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disks(h: usize, w: usize, centers: &[(f64, f64, f64)]) -> InstanceMask {
        InstanceMask::new(Array2::from_shape_fn((h, w), |(y, x)| {
            centers
                .iter()
                .enumerate()
                .find(|(_, &(cy, cx, r))| {
                    (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
                })
                .map_or(0, |(i, _)| i as u32 + 1)
        }))
    }

    #[test]
    fn empty_mask_encodes_to_zero() {
        let f = encode_flows(&InstanceMask::zeros(16, 12));
        assert_eq!(f, FlowTarget::zeros(16, 12));
    }

    #[test]
    fn single_pixel_instance_has_zero_flow() {
        let mut m = InstanceMask::zeros(5, 5);
        m.labels_mut()[[2, 2]] = 1;
        let f = encode_flows(&m);
        assert_eq!(f.flow_y[[2, 2]], 0.0);
        assert_eq!(f.flow_x[[2, 2]], 0.0);
        assert_eq!(f.prob[[2, 2]], 1.0);
    }

    #[test]
    fn flows_have_unit_or_zero_norm() {
        let m = disks(40, 40, &[(12.0, 12.0, 8.0), (27.0, 25.0, 9.0)]);
        let f = encode_flows(&m);
        for ((y, x), &l) in m.labels().indexed_iter() {
            let n = (f.flow_y[[y, x]].powi(2) + f.flow_x[[y, x]].powi(2)).sqrt();
            if l == 0 {
                assert_eq!(n, 0.0);
                assert_eq!(f.prob[[y, x]], 0.0);
            } else {
                assert!(n == 0.0 || (n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn all_zero_prob_decodes_empty() {
        let f = FlowTarget::zeros(32, 32);
        assert_eq!(decode_flows(&f, &DecodeConfig::default()).instance_count(), 0);
    }

    #[test]
    fn clustering_single_linkage() {
        let pts = [(0.0, 0.0), (0.0, 2.0), (0.0, 4.0), (10.0, 10.0), (10.5, 10.0)];
        let c = cluster_points(&pts, 2.5);
        assert_eq!(c, vec![0, 0, 0, 1, 1]);
        let c = cluster_points(&pts, 1.0);
        assert_eq!(c, vec![0, 1, 2, 3, 3]);
    }

    #[test]
    fn decode_is_deterministic() {
        let m = disks(48, 48, &[(15.0, 15.0, 9.0), (32.0, 30.0, 10.0)]);
        let f = encode_flows(&m);
        let cfg = DecodeConfig::default();
        assert_eq!(decode_flows(&f, &cfg), decode_flows(&f, &cfg));
    }

    #[test]
    fn channel_stack_roundtrip() {
        let m = disks(20, 24, &[(10.0, 12.0, 6.0)]);
        let f = encode_flows(&m);
        assert_eq!(FlowTarget::from_array(&f.to_array()).unwrap(), f);
    }
}
