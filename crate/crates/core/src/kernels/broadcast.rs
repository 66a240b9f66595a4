//! Same-rank broadcasting over matching-or-1 dims.

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

/// Offset into an operand of shape `src` for every element of `out`.
pub fn source_offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let total = numel(out);
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offs.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offs
}

/// Applies `f` elementwise with broadcasting.
pub fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let oa = source_offsets(&shape, a.shape());
    let ob = source_offsets(&shape, b.shape());
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(&shape, data)
}

/// Sums a gradient of the broadcast shape back down to `target`.
pub fn reduce_to<T: Real>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let offs = source_offsets(grad.shape(), target);
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    for (&o, &g) in offs.iter().zip(grad.data()) {
        od[o] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_weights_broadcast_over_space() {
        let offs = source_offsets(&[1, 2, 2, 2], &[1, 2, 1, 1]);
        assert_eq!(offs, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let offs = source_offsets(&[2, 2, 1, 2], &[2, 1, 1, 2]);
        assert_eq!(offs, vec![0, 1, 0, 1, 2, 3, 2, 3]);
    }

    #[test]
    fn incompatible_shapes_name_both() {
        let err = broadcast_shape("mul", &[1, 3, 4, 4], &[1, 2, 4, 4]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[1, 2, 4, 4]"), "{msg}");
    }
}
