//! Small raster filters shared by the synthesis and loss code.

use ndarray::{Array1, Array2, ArrayView1, Axis};

/// Symmetric (half-sample) reflection of an index into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_axis(img: &Array2<f32>, kernel: &[f64], axis: Axis) -> Array2<f32> {
    let radius = (kernel.len() / 2) as isize;
    let mut out = Array2::<f32>::zeros(img.dim());
    for (lane_in, mut lane_out) in img.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let n = lane_in.len();
        for i in 0..n {
            let mut acc = 0.0f64;
            for (j, w) in kernel.iter().enumerate() {
                let src = reflect_index(i as isize + j as isize - radius, n);
                acc += w * lane_in[src] as f64;
            }
            lane_out[i] = acc as f32;
        }
    }
    out
}

/// Separable Gaussian blur with reflected borders, truncated at 4σ.
/// `sigma <= 0` returns a copy.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let tmp = convolve_axis(img, &k, Axis(1));
    convolve_axis(&tmp, &k, Axis(0))
}

/// Binary dilation by a `size × size` square structuring element anchored at
/// `size / 2`. Sizes 0 and 1 leave the input unchanged.
pub fn dilate_square(mask: &Array2<bool>, size: usize) -> Array2<bool> {
    if size <= 1 {
        return mask.clone();
    }
    let lo = -((size / 2) as isize);
    let hi = (size - 1) as isize + lo;
    let (h, w) = mask.dim();
    // Rows first, then columns: a square element is separable.
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            rows[[y, x]] = (lo..=hi).any(|o| {
                let xx = x as isize - o;
                xx >= 0 && (xx as usize) < w && mask[[y, xx as usize]]
            });
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = (lo..=hi).any(|o| {
                let yy = y as isize - o;
                yy >= 0 && (yy as usize) < h && rows[[yy as usize, x]]
            });
        }
    }
    out
}

/// Second derivatives of the natural cubic spline through `values` at unit
/// spacing (Thomas algorithm).
fn natural_spline_moments(values: ArrayView1<f64>) -> Array1<f64> {
    let n = values.len();
    let mut m = Array1::zeros(n);
    if n < 3 {
        return m;
    }
    let k = n - 2;
    let mut c = vec![0.0; k];
    let mut d = vec![0.0; k];
    for i in 0..k {
        let rhs = 6.0 * (values[i + 2] - 2.0 * values[i + 1] + values[i]);
        if i == 0 {
            c[i] = 1.0 / 4.0;
            d[i] = rhs / 4.0;
        } else {
            let denom = 4.0 - c[i - 1];
            c[i] = 1.0 / denom;
            d[i] = (rhs - d[i - 1]) / denom;
        }
    }
    for i in (0..k).rev() {
        let next = if i + 1 < k { m[i + 2] } else { 0.0 };
        m[i + 1] = d[i] - c[i] * next;
    }
    m
}

fn spline_resample_1d(values: ArrayView1<f64>, out_len: usize) -> Array1<f64> {
    let n = values.len();
    if n == 1 {
        return Array1::from_elem(out_len, values[0]);
    }
    let moments = natural_spline_moments(values);
    let scale = if out_len > 1 {
        (n - 1) as f64 / (out_len - 1) as f64
    } else {
        0.0
    };
    Array1::from_shape_fn(out_len, |i| {
        let t = i as f64 * scale;
        let seg = (t.floor() as usize).min(n - 2);
        let u = t - seg as f64;
        let (y0, y1) = (values[seg], values[seg + 1]);
        let (m0, m1) = (moments[seg], moments[seg + 1]);
        let a = 1.0 - u;
        a * y0 + u * y1 + ((a * a * a - a) * m0 + (u * u * u - u) * m1) / 6.0
    })
}

/// Upsample a coarse grid to `(height, width)` with a separable natural cubic
/// spline whose knots span the full output extent. Interpolating: the corners
/// and every knot position reproduce the coarse values.
pub fn spline_upsample(coarse: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (ch, _) = coarse.dim();
    let mut rows = Array2::zeros((ch, width));
    for (src, mut dst) in coarse.rows().into_iter().zip(rows.rows_mut()) {
        dst.assign(&spline_resample_1d(src, width));
    }
    let mut out = Array2::zeros((height, width));
    for (src, mut dst) in rows.columns().into_iter().zip(out.columns_mut()) {
        dst.assign(&spline_resample_1d(src, height));
    }
    out
}

/// Otsu threshold over a 256-bin histogram of the image range.
pub fn otsu_threshold(img: &Array2<f32>) -> f32 {
    let (lo, hi) = img
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return lo;
    }
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in img.iter() {
        let b = (((v - lo) / (hi - lo)) * (BINS as f32 - 1.0)).round() as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total = img.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_bin) = (-1.0f64, 0usize);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    lo + (best_bin as f32 + 0.5) / (BINS as f32 - 1.0) * (hi - lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn blur_preserves_constant_and_mass() {
        let img = Array2::from_elem((9, 7), 0.25f32);
        let b = gaussian_blur(&img, 1.3);
        assert!(b.iter().all(|v| (v - 0.25).abs() < 1e-6));

        let mut spike = Array2::<f32>::zeros((31, 31));
        spike[[15, 15]] = 1.0;
        let b = gaussian_blur(&spike, 1.0);
        assert!((b.sum() - 1.0).abs() < 1e-5);
        assert!(b[[15, 15]] < 0.2 && b[[15, 16]] > b[[15, 17]]);
    }

    #[test]
    fn dilation_kernel_sizes() {
        let mut m = Array2::from_elem((7, 7), false);
        m[[3, 3]] = true;
        assert_eq!(dilate_square(&m, 0), m);
        assert_eq!(dilate_square(&m, 1), m);
        assert_eq!(dilate_square(&m, 3).iter().filter(|&&b| b).count(), 9);
        assert_eq!(dilate_square(&m, 5).iter().filter(|&&b| b).count(), 25);
        let d4 = dilate_square(&m, 4);
        assert_eq!(d4.iter().filter(|&&b| b).count(), 16);
        assert!(d4[[1, 1]] && d4[[4, 4]] && !d4[[5, 5]]);
    }

    #[test]
    fn spline_interpolates_knots_and_linear_data() {
        let coarse = array![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [6.0, 7.0, 8.0]];
        let up = spline_upsample(&coarse, 9, 5);
        assert!((up[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((up[[8, 4]] - 8.0).abs() < 1e-12);
        assert!((up[[4, 2]] - 4.0).abs() < 1e-12);
        // Linear data stays linear under a natural spline.
        for ((y, x), v) in up.indexed_iter() {
            let expect = 3.0 * (y as f64 * 2.0 / 8.0) + x as f64 * 2.0 / 4.0;
            assert!((v - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn otsu_separates_two_levels() {
        let img = Array2::from_shape_fn((10, 10), |(y, _)| if y < 5 { 0.1 } else { 0.8 });
        let t = otsu_threshold(&img);
        assert!(t > 0.1 && t < 0.8);
    }
}
