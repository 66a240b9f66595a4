//! Batched matrix products and softmax.

use crate::exec;
use crate::tensor::Real;

/// `c[b] = a[b] · m[b]` with `a: [B,M,K]`, `m: [B,K,N]`.
pub fn bmm<T: Real>(a: &[T], m: &[T], batch: usize, rows: usize, inner: usize, cols: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * rows * cols];
    exec::for_each_chunk(&mut c, cols, |idx, crow| {
        let b = idx / rows;
        let arow = &a[idx * inner..][..inner];
        let mb = &m[b * inner * cols..][..inner * cols];
        for (kk, &av) in arow.iter().enumerate() {
            let mrow = &mb[kk * cols..][..cols];
            for (cv, &mv) in crow.iter_mut().zip(mrow) {
                *cv += av * mv;
            }
        }
    });
    c
}

/// `da = dc · mᵀ`
pub fn bmm_grad_lhs<T: Real>(dc: &[T], m: &[T], batch: usize, rows: usize, inner: usize, cols: usize) -> Vec<T> {
    let mut da = vec![T::zero(); batch * rows * inner];
    exec::for_each_chunk(&mut da, inner, |idx, darow| {
        let b = idx / rows;
        let dcrow = &dc[idx * cols..][..cols];
        let mb = &m[b * inner * cols..][..inner * cols];
        for (kk, dv) in darow.iter_mut().enumerate() {
            let mrow = &mb[kk * cols..][..cols];
            *dv = dcrow.iter().zip(mrow).map(|(&x, &y)| x * y).sum();
        }
    });
    da
}

/// `dm = aᵀ · dc`
pub fn bmm_grad_rhs<T: Real>(a: &[T], dc: &[T], batch: usize, rows: usize, inner: usize, cols: usize) -> Vec<T> {
    let mut dm = vec![T::zero(); batch * inner * cols];
    exec::for_each_chunk(&mut dm, cols, |idx, dmrow| {
        let (b, kk) = (idx / inner, idx % inner);
        for r in 0..rows {
            let av = a[(b * rows + r) * inner + kk];
            let dcrow = &dc[(b * rows + r) * cols..][..cols];
            for (d, &g) in dmrow.iter_mut().zip(dcrow) {
                *d += av * g;
            }
        }
    });
    dm
}

/// Softmax over the middle axis of an `[outer, len, inner]` view, max-shifted.
pub fn softmax<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    exec::for_each_chunk(&mut y, len * inner, |o, block| {
        let xb = &x[o * len * inner..][..len * inner];
        for i in 0..inner {
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(xb[l * inner + i]);
            }
            let mut total = T::zero();
            for l in 0..len {
                let e = (xb[l * inner + i] - mx).exp();
                block[l * inner + i] = e;
                total += e;
            }
            for l in 0..len {
                block[l * inner + i] = block[l * inner + i] / total;
            }
        }
    });
    let _ = outer;
    y
}

/// `dx = y ⊙ (g − Σ g·y)` along the softmax axis.
pub fn softmax_grad<T: Real>(y: &[T], g: &[T], len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    exec::for_each_chunk(&mut dx, len * inner, |o, block| {
        let yb = &y[o * len * inner..][..len * inner];
        let gb = &g[o * len * inner..][..len * inner];
        for i in 0..inner {
            let mut s = T::zero();
            for l in 0..len {
                s += yb[l * inner + i] * gb[l * inner + i];
            }
            for l in 0..len {
                let j = l * inner + i;
                block[j] = yb[j] * (gb[j] - s);
            }
        }
    });
    dx
}
