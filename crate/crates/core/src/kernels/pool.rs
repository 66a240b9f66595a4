//! Index maps for max pooling, padding and cropping. Each returns, for every
//! output element, the flat index of the input element it copies.

use crate::tensor::Real;

/// Non-overlapping `k×k` max pooling with stride `k`. Ties go to the first
/// element in row-major window order.
pub fn maxpool_argmax<T: Real>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<usize> {
    let (oh, ow) = (h / k, w / k);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                idx.push(window_argmax(x, base, w, oy * k..oy * k + k, ox * k..ox * k + k));
            }
        }
    }
    idx
}

/// Adaptive max pooling: window `i` spans `[floor(i·H/out), ceil((i+1)·H/out))`.
pub fn adaptive_maxpool_argmax<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<usize> {
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            let ys = (oy * h) / oh..((oy + 1) * h).div_ceil(oh);
            for ox in 0..ow {
                let xs = (ox * w) / ow..((ox + 1) * w).div_ceil(ow);
                idx.push(window_argmax(x, base, w, ys.clone(), xs));
            }
        }
    }
    idx
}

fn window_argmax<T: Real>(
    x: &[T],
    base: usize,
    w: usize,
    ys: std::ops::Range<usize>,
    xs: std::ops::Range<usize>,
) -> usize {
    let mut best = base + ys.start * w + xs.start;
    for y in ys {
        for xx in xs.clone() {
            let i = base + y * w + xx;
            if x[i] > x[best] {
                best = i;
            }
        }
    }
    best
}

/// Reflect-pads each plane at the bottom and right edge.
pub fn reflect_pad_index(planes: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<usize> {
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let (oh, ow) = (h + ph, w + pw);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                idx.push(p * h * w + reflect(y, h) * w + reflect(x, w));
            }
        }
    }
    idx
}

/// Top-left `oh×ow` crop of each plane.
pub fn crop_index(planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                idx.push(p * h * w + y * w + x);
            }
        }
    }
    idx
}
