//! Percentile intensity normalization.

use ndarray::Array2;

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(img: &Array2<f32>, p: f64) -> f32 {
    let mut v: Vec<f32> = img.iter().copied().collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f32::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = (pos - lo as f64) as f32;
    v[lo] * (1.0 - t) + v[hi] * t
}

/// Map `[low, high]` to `[0, 1]` and clip. A flat range maps to zeros.
pub fn rescale(img: &Array2<f32>, low: f32, high: f32) -> Array2<f32> {
    let span = high - low;
    if !(span > 0.0) {
        return Array2::zeros(img.dim());
    }
    img.mapv(|v| ((v - low) / span).clamp(0.0, 1.0))
}

/// Per-image `p_low`–`p_high` percentile normalization to `[0, 1]`.
pub fn normalize_percentile(img: &Array2<f32>, p_low: f64, p_high: f64) -> Array2<f32> {
    rescale(img, percentile(img, p_low), percentile(img, p_high))
}

/// `[0, 1]` → `[-1, 1]`, the network input range.
pub fn to_signed(img: &Array2<f32>) -> Array2<f32> {
    img.mapv(|v| 2.0 * v - 1.0)
}

/// `[-1, 1]` → `[0, 1]`.
pub fn to_unit(img: &Array2<f32>) -> Array2<f32> {
    img.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}
