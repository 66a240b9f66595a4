//! PSNR and single-scale SSIM over whole RGB images, no border cropping.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `10·log10(peak² / MSE)` over every element; identical inputs give `+∞`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = se / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample: `-1 → 1`, `n → n − 2`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Separable Gaussian blur of one `h × w` plane.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64], range: f64) -> f64 {
    let (c1, c2) = ((K1 * range).powi(2), (K2 * range).powi(2));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = blur(a, h, w, taps);
    let mu_b = blur(b, h, w, taps);
    let aa = blur(&prod(a, a), h, w, taps);
    let bb = blur(&prod(b, b), h, w, taps);
    let ab = blur(&prod(a, b), h, w, taps);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (h * w) as f64
}

/// Mean SSIM over every channel of every image in an `[N, C, H, W]` pair,
/// 11×11 Gaussian window (σ = 1.5), reflect borders, data range 1.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::pre("ssim", format!("{h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let plane = h * w;
    let to64 = |t: &Tensor<T>, k: usize| -> Vec<f64> { t.data()[k * plane..(k + 1) * plane].iter().map(|v| v.as_f64()).collect() };
    let sum: f64 = (0..n * c)
        .map(|k| ssim_plane(&to64(a, k), &to64(b, k), h, w, &taps, 1.0))
        .sum();
    Ok(sum / (n * c) as f64)
}
