//! Direct 2-D convolution kernels (NCHW), forward and backward.
//!
//! A convolution tap `(kh, kw)` maps a position `o` on the "small" grid to
//! `o * stride + k * dilation - pad` on the "big" grid. For `conv2d` the small
//! grid is the output; for `conv_transpose2d` it is the input. The three
//! primitives below (`gather`, `scatter`, `dot`) cover both ops in both
//! directions.

use crate::exec;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub small: (usize, usize),
    pub big: (usize, usize),
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

/// Positions `o` in `[lo, hi)` with `0 <= o * s + off < big`.
#[inline]
fn valid_range(off: isize, s: usize, small: usize, big: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(s)
    };
    let last = big as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = small.min(last as usize / s + 1);
    (lo, hi.max(lo))
}

impl Window {
    #[inline]
    fn tap(&self, kh: usize, kw: usize) -> Tap {
        let offy = (kh * self.dilation) as isize - self.pad as isize;
        let offx = (kw * self.dilation) as isize - self.pad as isize;
        let (y0, y1) = valid_range(offy, self.stride, self.small.0, self.big.0);
        let (x0, x1) = valid_range(offx, self.stride, self.small.1, self.big.1);
        Tap {
            offy,
            offx,
            y0,
            y1,
            x0,
            x1,
        }
    }

    fn small_len(&self) -> usize {
        self.small.0 * self.small.1
    }

    fn big_len(&self) -> usize {
        self.big.0 * self.big.1
    }
}

struct Tap {
    offy: isize,
    offx: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

/// `small[o] += wv * big[map(o)]`
#[inline]
fn gather<T: Real>(small: &mut [T], big: &[T], wv: T, win: &Window, t: &Tap) {
    let (sw, bw, s) = (win.small.1, win.big.1, win.stride);
    for oy in t.y0..t.y1 {
        let iy = (oy * s) as isize + t.offy;
        let srow = &mut small[oy * sw..(oy + 1) * sw];
        let brow = &big[iy as usize * bw..(iy as usize + 1) * bw];
        if s == 1 {
            let ix0 = (t.x0 as isize + t.offx) as usize;
            let n = t.x1 - t.x0;
            for (o, &i) in srow[t.x0..t.x1].iter_mut().zip(&brow[ix0..ix0 + n]) {
                *o += wv * i;
            }
        } else {
            for ox in t.x0..t.x1 {
                srow[ox] += wv * brow[((ox * s) as isize + t.offx) as usize];
            }
        }
    }
}

/// `big[map(o)] += wv * small[o]`
#[inline]
fn scatter<T: Real>(big: &mut [T], small: &[T], wv: T, win: &Window, t: &Tap) {
    let (sw, bw, s) = (win.small.1, win.big.1, win.stride);
    for oy in t.y0..t.y1 {
        let iy = (oy * s) as isize + t.offy;
        let srow = &small[oy * sw..(oy + 1) * sw];
        let brow = &mut big[iy as usize * bw..(iy as usize + 1) * bw];
        if s == 1 {
            let ix0 = (t.x0 as isize + t.offx) as usize;
            let n = t.x1 - t.x0;
            for (b, &v) in brow[ix0..ix0 + n].iter_mut().zip(&srow[t.x0..t.x1]) {
                *b += wv * v;
            }
        } else {
            for ox in t.x0..t.x1 {
                brow[((ox * s) as isize + t.offx) as usize] += wv * srow[ox];
            }
        }
    }
}

/// `sum_o small[o] * big[map(o)]`
#[inline]
fn dot<T: Real>(small: &[T], big: &[T], win: &Window, t: &Tap) -> T {
    let (sw, bw, s) = (win.small.1, win.big.1, win.stride);
    let mut acc = T::zero();
    for oy in t.y0..t.y1 {
        let iy = (oy * s) as isize + t.offy;
        let srow = &small[oy * sw..(oy + 1) * sw];
        let brow = &big[iy as usize * bw..(iy as usize + 1) * bw];
        if s == 1 {
            let ix0 = (t.x0 as isize + t.offx) as usize;
            acc += dot_lanes(&srow[t.x0..t.x1], &brow[ix0..ix0 + (t.x1 - t.x0)]);
        } else {
            for ox in t.x0..t.x1 {
                acc += srow[ox] * brow[((ox * s) as isize + t.offx) as usize];
            }
        }
    }
    acc
}

/// Dot product with eight independent accumulators, summed in a fixed order.
#[inline]
fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        acc += *x * *y;
    }
    lanes.iter().fold(acc, |s, &v| s + v)
}

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let extent = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    (padded >= extent).then(|| (padded - extent) / stride + 1)
}

pub fn conv_transpose_out_len(input: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + dilation * (kernel - 1) + 1;
    (full > 2 * pad).then(|| full - 2 * pad)
}

/// Sizes shared by the forward and backward passes.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub win: Window,
}

impl ConvDims {
    fn kk(&self) -> usize {
        self.win.kernel * self.win.kernel
    }
}

/// `conv2d` forward. `x: [N,Cin,big]`, `w: [Cout,Cin,k,k]`, output `[N,Cout,small]`.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let (sl, bl, k, kk) = (d.win.small_len(), d.win.big_len(), d.win.kernel, d.kk());
    let mut out = vec![T::zero(); d.batch * d.c_out * sl];
    exec::for_each_chunk(&mut out, sl, |idx, plane| {
        let (n, co) = (idx / d.c_out, idx % d.c_out);
        if let Some(b) = b {
            plane.fill(b[co]);
        }
        for ci in 0..d.c_in {
            let xin = &x[(n * d.c_in + ci) * bl..][..bl];
            let wrow = &w[(co * d.c_in + ci) * kk..][..kk];
            for kh in 0..k {
                for kw in 0..k {
                    let t = d.win.tap(kh, kw);
                    gather(plane, xin, wrow[kh * k + kw], &d.win, &t);
                }
            }
        }
    });
    out
}

/// Gradient of `conv2d` w.r.t. its input.
pub fn conv2d_backward_input<T: Real>(g: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let (sl, bl, k, kk) = (d.win.small_len(), d.win.big_len(), d.win.kernel, d.kk());
    let mut gx = vec![T::zero(); d.batch * d.c_in * bl];
    exec::for_each_chunk(&mut gx, bl, |idx, plane| {
        let (n, ci) = (idx / d.c_in, idx % d.c_in);
        for co in 0..d.c_out {
            let gp = &g[(n * d.c_out + co) * sl..][..sl];
            let wrow = &w[(co * d.c_in + ci) * kk..][..kk];
            for kh in 0..k {
                for kw in 0..k {
                    let t = d.win.tap(kh, kw);
                    scatter(plane, gp, wrow[kh * k + kw], &d.win, &t);
                }
            }
        }
    });
    gx
}

/// Gradient of `conv2d` w.r.t. weight `[Cout,Cin,k,k]`.
pub fn conv2d_backward_weight<T: Real>(g: &[T], x: &[T], d: &ConvDims) -> Vec<T> {
    let (sl, bl, k, kk) = (d.win.small_len(), d.win.big_len(), d.win.kernel, d.kk());
    let mut gw = vec![T::zero(); d.c_out * d.c_in * kk];
    exec::for_each_chunk(&mut gw, d.c_in * kk, |co, row| {
        for ci in 0..d.c_in {
            for kh in 0..k {
                for kw in 0..k {
                    let t = d.win.tap(kh, kw);
                    let mut acc = T::zero();
                    for n in 0..d.batch {
                        let gp = &g[(n * d.c_out + co) * sl..][..sl];
                        let xp = &x[(n * d.c_in + ci) * bl..][..bl];
                        acc += dot(gp, xp, &d.win, &t);
                    }
                    row[ci * kk + kh * k + kw] = acc;
                }
            }
        }
    });
    gw
}

/// Per-channel sum of `g: [N,C,plane]`.
pub fn bias_grad<T: Real>(g: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| {
            let mut acc = T::zero();
            for n in 0..batch {
                acc += g[(n * channels + c) * plane..][..plane].iter().copied().sum::<T>();
            }
            acc
        })
        .collect()
}

/// `conv_transpose2d` forward. `x: [N,Cin,small]`, `w: [Cin,Cout,k,k]`, output `[N,Cout,big]`.
pub fn conv_transpose2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let (sl, bl, k, kk) = (d.win.small_len(), d.win.big_len(), d.win.kernel, d.kk());
    let mut out = vec![T::zero(); d.batch * d.c_out * bl];
    exec::for_each_chunk(&mut out, bl, |idx, plane| {
        let (n, co) = (idx / d.c_out, idx % d.c_out);
        if let Some(b) = b {
            plane.fill(b[co]);
        }
        for ci in 0..d.c_in {
            let xin = &x[(n * d.c_in + ci) * sl..][..sl];
            let wrow = &w[(ci * d.c_out + co) * kk..][..kk];
            for kh in 0..k {
                for kw in 0..k {
                    let t = d.win.tap(kh, kw);
                    scatter(plane, xin, wrow[kh * k + kw], &d.win, &t);
                }
            }
        }
    });
    out
}

pub fn conv_transpose2d_backward_input<T: Real>(g: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let (sl, bl, k, kk) = (d.win.small_len(), d.win.big_len(), d.win.kernel, d.kk());
    let mut gx = vec![T::zero(); d.batch * d.c_in * sl];
    exec::for_each_chunk(&mut gx, sl, |idx, plane| {
        let (n, ci) = (idx / d.c_in, idx % d.c_in);
        for co in 0..d.c_out {
            let gp = &g[(n * d.c_out + co) * bl..][..bl];
            let wrow = &w[(ci * d.c_out + co) * kk..][..kk];
            for kh in 0..k {
                for kw in 0..k {
                    let t = d.win.tap(kh, kw);
                    gather(plane, gp, wrow[kh * k + kw], &d.win, &t);
                }
            }
        }
    });
    gx
}

pub fn conv_transpose2d_backward_weight<T: Real>(g: &[T], x: &[T], d: &ConvDims) -> Vec<T> {
    let (sl, bl, k, kk) = (d.win.small_len(), d.win.big_len(), d.win.kernel, d.kk());
    let mut gw = vec![T::zero(); d.c_in * d.c_out * kk];
    exec::for_each_chunk(&mut gw, d.c_out * kk, |ci, row| {
        for co in 0..d.c_out {
            for kh in 0..k {
                for kw in 0..k {
                    let t = d.win.tap(kh, kw);
                    let mut acc = T::zero();
                    for n in 0..d.batch {
                        let xp = &x[(n * d.c_in + ci) * sl..][..sl];
                        let gp = &g[(n * d.c_out + co) * bl..][..bl];
                        acc += dot(xp, gp, &d.win, &t);
                    }
                    row[co * kk + kh * k + kw] = acc;
                }
            }
        }
    });
    gw
}
