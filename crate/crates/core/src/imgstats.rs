//! Per-image properties: luma entropy, edge density, local contrast and the
//! spectral peak-to-mean ratio.
//!
//! Edge density and local contrast are stand-ins for shape and texture
//! measures; both are computed on intensities scaled to [0,1].

use std::fmt::Write as _;

use crate::image::RgbImage;
use crate::stats::percentile_type7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageProperties {
    pub entropy: f64,
    pub shape: f64,
    pub texture: f64,
    pub peak_to_mean: f64,
}

/// Grey levels 0..=255 used by the entropy histogram.
pub fn luma_levels(img: &RgbImage) -> Vec<u8> {
    img.luma().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
}

/// Shannon entropy in bits of the 256-bin luma histogram.
pub fn entropy(img: &RgbImage) -> f64 {
    let levels = luma_levels(img);
    let mut hist = [0usize; 256];
    for &l in &levels {
        hist[l as usize] += 1;
    }
    let n = levels.len() as f64;
    hist.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum::<f64>() + 0.0
}

/// In-place iterative radix-2 FFT. `re.len()` must be a power of two.
pub fn fft_inplace(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert!(n.is_power_of_two() && im.len() == n, "fft length {n} must be a power of two");
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (s, c) = (ang * k as f64).sin_cos();
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Power spectrum of a row-major `w`×`h` field placed at the top-left of a
/// zero square whose side is the next power of two. Returns `(side, power)`
/// with power row-major in `(ky, kx)` and DC at index 0.
pub fn fft2_power_field(values: &[f64], w: usize, h: usize) -> (usize, Vec<f64>) {
    let n = w.max(h).next_power_of_two();
    let mut re = vec![0.0; n * n];
    let mut im = vec![0.0; n * n];
    for y in 0..h {
        re[y * n..y * n + w].copy_from_slice(&values[y * w..(y + 1) * w]);
    }
    for y in 0..n {
        fft_inplace(&mut re[y * n..(y + 1) * n], &mut im[y * n..(y + 1) * n]);
    }
    let (mut cr, mut ci) = (vec![0.0; n], vec![0.0; n]);
    for x in 0..n {
        for y in 0..n {
            cr[y] = re[y * n + x];
            ci[y] = im[y * n + x];
        }
        fft_inplace(&mut cr, &mut ci);
        for y in 0..n {
            re[y * n + x] = cr[y];
            im[y * n + x] = ci[y];
        }
    }
    (n, re.iter().zip(&im).map(|(a, b)| a * a + b * b).collect())
}

/// Power spectrum of the image's [0,1] grey values; a 224×224 image is
/// padded to 256×256.
pub fn fft2_power(img: &RgbImage) -> (usize, Vec<f64>) {
    fft2_power_field(&img.gray_unit(), img.width, img.height)
}

/// Largest non-DC power over the mean non-DC power; 1 when there is no
/// non-DC power at all.
pub fn peak_to_mean(power: &[f64]) -> f64 {
    let rest = &power[1.min(power.len())..];
    let mean = rest.iter().sum::<f64>() / rest.len().max(1) as f64;
    if mean <= 0.0 {
        return 1.0;
    }
    rest.iter().copied().fold(0.0, f64::max) / mean
}

/// Sobel gradient magnitude with edge pixels replicated past the border.
pub fn sobel_magnitude(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| values[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1) - at(x - 1, y - 1) - 2.0 * at(x - 1, y) - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1) - at(x - 1, y - 1) - 2.0 * at(x, y - 1) - at(x + 1, y - 1);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Fraction of pixels whose Sobel magnitude is strictly above the image's
/// 75th-percentile magnitude.
pub fn shape_metric(img: &RgbImage) -> f64 {
    let mag = sobel_magnitude(&img.gray_unit(), img.width, img.height);
    if mag.is_empty() {
        return 0.0;
    }
    let mut sorted = mag.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = percentile_type7(&sorted, 0.75);
    mag.iter().filter(|&&m| m > cut).count() as f64 / mag.len() as f64
}

/// Population standard deviation over each pixel's 5×5 neighbourhood,
/// clipped at the image border.
pub fn local_std_map(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (ys, xs) = (y.saturating_sub(2)..(y + 3).min(h), x.saturating_sub(2)..(x + 3).min(w));
            let n = (ys.len() * xs.len()) as f64;
            // Centering on one cell keeps flat patches at exactly zero.
            let origin = values[ys.start * w + xs.start];
            let cells = || ys.clone().flat_map(|yy| xs.clone().map(move |xx| values[yy * w + xx] - origin));
            let mean = cells().sum::<f64>() / n;
            out.push((cells().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt());
        }
    }
    out
}

pub fn texture_metric(img: &RgbImage) -> f64 {
    let map = local_std_map(&img.gray_unit(), img.width, img.height);
    map.iter().sum::<f64>() / map.len().max(1) as f64
}

pub fn properties(img: &RgbImage) -> ImageProperties {
    ImageProperties {
        entropy: entropy(img),
        shape: shape_metric(img),
        texture: texture_metric(img),
        peak_to_mean: peak_to_mean(&fft2_power(img).1),
    }
}

/// `image,entropy,shape,texture,peak_to_mean`.
pub fn properties_csv(rows: &[(String, ImageProperties)]) -> String {
    let mut out = String::from("image,entropy,shape,texture,peak_to_mean\n");
    for (id, p) in rows {
        writeln!(out, "{id},{:.10},{:.10},{:.10},{:.10}", p.entropy, p.shape, p.texture, p.peak_to_mean).unwrap();
    }
    out
}
