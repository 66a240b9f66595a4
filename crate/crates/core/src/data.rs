//! Crops and lossless augmentation for `[1, C, H, W]` images.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A right-angle rotation followed by optional flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    /// Quarter turns counter-clockwise, `0..4`.
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Augment {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augment {
            quarter_turns: rng.gen_range(0..4),
            flip_h: rng.gen(),
            flip_v: rng.gen(),
        }
    }

    pub fn apply<T: Real>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = img.dims4()?;
        let turns = self.quarter_turns % 4;
        let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
        let src = img.data();
        let mut out = Vec::with_capacity(src.len());
        for plane in src.chunks(h * w).take(n * c) {
            for y in 0..oh {
                for x in 0..ow {
                    let y = if self.flip_v { oh - 1 - y } else { y };
                    let x = if self.flip_h { ow - 1 - x } else { x };
                    // (y, x) in the rotated frame → source coordinates
                    let (sy, sx) = match turns {
                        0 => (y, x),
                        1 => (x, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - x),
                        _ => (h - 1 - x, y),
                    };
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        Tensor::new(&[n, c, oh, ow], out)
    }
}

/// Top-left corner of a uniformly random `size × size` window.
pub fn random_window<R: Rng + ?Sized>(h: usize, w: usize, size: usize, rng: &mut R) -> Result<(usize, usize)> {
    if size == 0 || size > h || size > w {
        return Err(Error::pre("random_window", format!("crop {size} does not fit {h}×{w}")));
    }
    Ok((rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)))
}

pub fn crop<T: Real>(img: &Tensor<T>, top: usize, left: usize, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.dims4()?;
    if top + oh > h || left + ow > w {
        return Err(Error::pre("crop", format!("window {oh}×{ow} at ({top},{left}) exceeds {h}×{w}")));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in src.chunks(h * w) {
        for y in top..top + oh {
            out.extend_from_slice(&plane[y * w + left..y * w + left + ow]);
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Centered crop to the largest multiple of `multiple` not above `cap`.
pub fn center_crop_multiple<T: Real>(img: &Tensor<T>, multiple: usize, cap: usize) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.dims4()?;
    let fit = |d: usize| (d.min(cap) / multiple) * multiple;
    let (oh, ow) = (fit(h), fit(w));
    if oh == 0 || ow == 0 {
        return Err(Error::pre("center_crop", format!("{h}×{w} is smaller than {multiple}")));
    }
    crop(img, (h - oh) / 2, (w - ow) / 2, oh, ow)
}
