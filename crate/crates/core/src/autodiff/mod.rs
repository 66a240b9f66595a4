//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of nodes. Every op appends a node holding its
//! forward value and the context its backward rule needs, so creation order
//! is a topological order and the graph is acyclic by construction. A new
//! tape is built for every forward pass; weight sharing across repeated block
//! applications falls out naturally because each parameter is bound to a
//! single leaf per tape.

pub mod gradcheck;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::broadcast::{broadcast_shape, reduce_to, zip_with};
use crate::kernels::conv::{self, ConvDims, Window};
use crate::kernels::{linalg, pool};
use crate::nn::{ConvSpec, ParamId, ParamStore};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    /// `out[i] = x[index[i]]`; covers pooling, padding, cropping and permutes.
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Bmm {
        a: Var,
        b: Var,
        dims: [usize; 4],
    },
    Softmax {
        x: Var,
        len: usize,
        inner: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Reshape(Var),
    SpatialMean {
        x: Var,
        plane: usize,
    },
    Sum(Var),
    Mean(Var),
    L1Mean(Var, Var),
    BceLogits {
        x: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass and runs backward once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, usize), Var>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that collects a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a stored parameter, once per tape. Frozen stores bind constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let value = store.get(id).clone();
        let v = if store.is_frozen() {
            self.constant(value)
        } else {
            self.variable(value)
        };
        self.params.insert(key, v);
        v
    }

    /// Number of parameters of `store` bound on this tape so far.
    pub fn bound_params(&self, store: &ParamStore<T>) -> usize {
        self.params.keys().filter(|(uid, _)| *uid == store.uid()).count()
    }

    /// Gradients for every parameter of `store`, in store order. Parameters
    /// never bound, or bound frozen, report `None`.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&(store.uid(), id.0))
                    .and_then(|&v| self.grad(v).cloned())
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ----- elementwise -----

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        zip_with(self.value(a), self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::Shift(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    // ----- convolution -----

    fn conv_dims(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: &ConvSpec,
        transposed: bool,
    ) -> Result<ConvDims> {
        let op = if transposed { "conv_transpose2d" } else { "conv2d" };
        spec.validate()?;
        let (n, c, h, wd) = self.value(x).dims4()?;
        let k = spec.kernel;
        let want_w = if transposed {
            [spec.in_ch, spec.out_ch, k, k]
        } else {
            [spec.out_ch, spec.in_ch, k, k]
        };
        if self.shape(w) != want_w {
            return Err(Error::shape(op, self.shape(w), &want_w));
        }
        if c != spec.in_ch {
            return Err(Error::shape(op, self.shape(x), &[n, spec.in_ch, h, wd]));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_ch] {
                return Err(Error::shape(op, self.shape(b), &[spec.out_ch]));
            }
        }
        let len = |i: usize| {
            if transposed {
                conv::conv_transpose_out_len(i, k, spec.stride, spec.dilation, spec.padding)
            } else {
                conv::conv_out_len(i, k, spec.stride, spec.dilation, spec.padding)
            }
        };
        let (oh, ow) = match (len(h), len(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::pre(
                    op,
                    format!("input {h}x{wd} too small for kernel {k} dilation {}", spec.dilation),
                ))
            }
        };
        let (small, big) = if transposed {
            ((h, wd), (oh, ow))
        } else {
            ((oh, ow), (h, wd))
        };
        Ok(ConvDims {
            batch: n,
            c_in: spec.in_ch,
            c_out: spec.out_ch,
            win: Window {
                small,
                big,
                kernel: k,
                stride: spec.stride,
                dilation: spec.dilation,
                pad: spec.padding,
            },
        })
    }

    /// 2-D convolution, `x: [N,Cin,H,W]`, `w: [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let dims = self.conv_dims(x, w, b, spec, false)?;
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let (oh, ow) = dims.win.small;
        let t = Tensor::new(&[dims.batch, dims.c_out, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, dims }, &inputs))
    }

    /// Transposed 2-D convolution, `x: [N,Cin,H,W]`, `w: [Cin,Cout,k,k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let dims = self.conv_dims(x, w, b, spec, true)?;
        let out = conv::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let (oh, ow) = dims.win.big;
        let t = Tensor::new(&[dims.batch, dims.c_out, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, dims }, &inputs))
    }

    // ----- index ops -----

    fn gather(&mut self, x: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, index }, &[x]))
    }

    /// Max pooling with `kernel == stride`.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if kernel != stride || kernel == 0 {
            return Err(Error::pre("maxpool2d", format!("kernel {kernel} must equal stride {stride}")));
        }
        if h % kernel != 0 || w % kernel != 0 {
            return Err(Error::pre("maxpool2d", format!("{h}x{w} not divisible by {kernel}")));
        }
        let index = pool::maxpool_argmax(self.value(x).data(), n * c, h, w, kernel);
        self.gather(x, &[n, c, h / kernel, w / kernel], index)
    }

    pub fn adaptive_maxpool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::pre(
                "adaptive_maxpool2d",
                format!("output {out_h}x{out_w} invalid for input {h}x{w}"),
            ));
        }
        let index = pool::adaptive_maxpool_argmax(self.value(x).data(), n * c, h, w, out_h, out_w);
        self.gather(x, &[n, c, out_h, out_w], index)
    }

    /// Reflect padding on the bottom and right edges.
    pub fn reflect_pad(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if pad_h >= h || pad_w >= w {
            return Err(Error::pre("reflect_pad", format!("pad {pad_h}x{pad_w} too large for {h}x{w}")));
        }
        let index = pool::reflect_pad_index(n * c, h, w, pad_h, pad_w);
        self.gather(x, &[n, c, h + pad_h, w + pad_w], index)
    }

    /// Keeps the top-left `out_h×out_w` region.
    pub fn crop(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h > h || out_w > w {
            return Err(Error::pre("crop", format!("{out_h}x{out_w} exceeds {h}x{w}")));
        }
        let index = pool::crop_index(n * c, h, w, out_h, out_w);
        self.gather(x, &[n, c, out_h, out_w], index)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::pre("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&out_shape);
        let mut index = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            index.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        self.gather(x, &out_shape, index)
    }

    // ----- linear algebra -----

    /// Matrix product of rank-2 `[M,K]·[K,N]` or batched rank-3 `[B,M,K]·[B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, rows, inner, cols, out_shape) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n, vec![*b1, *m, *n]),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let out = linalg::bmm(self.value(a).data(), self.value(b).data(), batch, rows, inner, cols);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            t,
            Op::Bmm {
                a,
                b,
                dims: [batch, rows, inner, cols],
            },
            &[a, b],
        ))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::pre("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let y = linalg::softmax(self.value(x).data(), outer, len, inner);
        let t = Tensor::new(&shape, y)?;
        Ok(self.push(t, Op::Softmax { x, len, inner }, &[x]))
    }

    // ----- shape -----

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::pre("concat", "empty input list"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::pre("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (&v, &wdt) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[o * wdt..(o + 1) * wdt]);
            }
        }
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                widths,
            },
            xs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    // ----- reductions -----

    /// Global average pooling `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let inv = T::lit(1.0 / plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.push(t, Op::SpatialMean { x, plane }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        self.push(t, Op::Mean(x), &[x])
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l1_mean", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let total: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let t = Tensor::scalar(total / T::lit(va.numel() as f64));
        Ok(self.push(t, Op::L1Mean(a, b), &[a, b]))
    }

    /// Mean binary cross-entropy of logits `x` against fixed 0/1 targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != target.len() {
            return Err(Error::shape("bce_with_logits", v.shape(), &[target.len()]));
        }
        let total: T = v
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let out = Tensor::scalar(total / T::lit(target.len() as f64));
        Ok(self.push(
            out,
            Op::BceLogits {
                x,
                target: target.to_vec(),
            },
            &[x],
        ))
    }

    // ----- backward -----

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires a
    /// gradient. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape()), grads);
                acc(*b, reduce_to(g, val(*b).shape()), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape()), grads);
                if wants(*b) {
                    acc(*b, reduce_to(&g.map(|x| -x), val(*b).shape()), grads);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga = zip_with(g, val(*b), "mul", |x, y| x * y)?;
                    acc(*a, reduce_to(&ga, val(*a).shape()), grads);
                }
                if wants(*b) {
                    let gb = zip_with(g, val(*a), "mul", |x, y| x * y)?;
                    acc(*b, reduce_to(&gb, val(*b).shape()), grads);
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    let ga = zip_with(g, val(*b), "div", |x, y| x / y)?;
                    acc(*a, reduce_to(&ga, val(*a).shape()), grads);
                }
                if wants(*b) {
                    // d(a/b)/db = -out / b
                    let t = zip_with(g, &node.value, "div", |x, y| -x * y)?;
                    let gb = zip_with(&t, val(*b), "div", |x, y| x / y)?;
                    acc(*b, reduce_to(&gb, val(*b).shape()), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s), grads),
            Op::Shift(a) => acc(*a, g.clone(), grads),
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*a, Tensor::new(x.shape(), data)?, grads);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                acc(*a, Tensor::new(y.shape(), data)?, grads);
            }
            Op::Conv2d { x, w, b, dims } => {
                if wants(*x) {
                    let gx = conv::conv2d_backward_input(g.data(), val(*w).data(), dims);
                    acc(*x, Tensor::new(val(*x).shape(), gx)?, grads);
                }
                if wants(*w) {
                    let gw = conv::conv2d_backward_weight(g.data(), val(*x).data(), dims);
                    acc(*w, Tensor::new(val(*w).shape(), gw)?, grads);
                }
                if let Some(b) = b {
                    let plane = dims.win.small.0 * dims.win.small.1;
                    let gb = conv::bias_grad(g.data(), dims.batch, dims.c_out, plane);
                    acc(*b, Tensor::new(&[dims.c_out], gb)?, grads);
                }
            }
            Op::ConvTranspose2d { x, w, b, dims } => {
                if wants(*x) {
                    let gx = conv::conv_transpose2d_backward_input(g.data(), val(*w).data(), dims);
                    acc(*x, Tensor::new(val(*x).shape(), gx)?, grads);
                }
                if wants(*w) {
                    let gw = conv::conv_transpose2d_backward_weight(g.data(), val(*x).data(), dims);
                    acc(*w, Tensor::new(val(*w).shape(), gw)?, grads);
                }
                if let Some(b) = b {
                    let plane = dims.win.big.0 * dims.win.big.1;
                    let gb = conv::bias_grad(g.data(), dims.batch, dims.c_out, plane);
                    acc(*b, Tensor::new(&[dims.c_out], gb)?, grads);
                }
            }
            Op::Gather { x, index } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let d = gx.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    d[i] += gv;
                }
                acc(*x, gx, grads);
            }
            Op::Bmm { a, b, dims } => {
                let [batch, rows, inner, cols] = *dims;
                if wants(*a) {
                    let ga = linalg::bmm_grad_lhs(g.data(), val(*b).data(), batch, rows, inner, cols);
                    acc(*a, Tensor::new(val(*a).shape(), ga)?, grads);
                }
                if wants(*b) {
                    let gb = linalg::bmm_grad_rhs(val(*a).data(), g.data(), batch, rows, inner, cols);
                    acc(*b, Tensor::new(val(*b).shape(), gb)?, grads);
                }
            }
            Op::Softmax { x, len, inner } => {
                let dx = linalg::softmax_grad(node.value.data(), g.data(), *len, *inner);
                acc(*x, Tensor::new(node.value.shape(), dx)?, grads);
            }
            Op::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut start = 0;
                for (&v, &wdt) in xs.iter().zip(widths) {
                    if wants(v) {
                        let mut data = Vec::with_capacity(outer * wdt);
                        for o in 0..*outer {
                            data.extend_from_slice(&g.data()[o * total + start..o * total + start + wdt]);
                        }
                        acc(v, Tensor::new(val(v).shape(), data)?, grads);
                    }
                    start += wdt;
                }
            }
            Op::Reshape(x) => acc(*x, g.clone().reshaped(val(*x).shape())?, grads),
            Op::SpatialMean { x, plane } => {
                let inv = T::lit(1.0 / *plane as f64);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv * inv).take(*plane))
                    .collect();
                acc(*x, Tensor::new(val(*x).shape(), data)?, grads);
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0]), grads),
            Op::Mean(x) => {
                let n = T::lit(val(*x).numel() as f64);
                acc(*x, Tensor::full(val(*x).shape(), g.data()[0] / n), grads);
            }
            Op::L1Mean(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let scale = g.data()[0] / T::lit(va.numel() as f64);
                let sign: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if wants(*b) {
                    acc(*b, Tensor::new(vb.shape(), sign.iter().map(|&s| -s).collect())?, grads);
                }
                acc(*a, Tensor::new(va.shape(), sign)?, grads);
            }
            Op::BceLogits { x, target } => {
                let v = val(*x);
                let scale = g.data()[0] / T::lit(target.len() as f64);
                let data = v
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                    .collect();
                acc(*x, Tensor::new(v.shape(), data)?, grads);
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Broadcast result shape of two operands, for callers that need it up front.
pub fn broadcast_result_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    broadcast_shape("broadcast", a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        let l = tape.sum(r);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.variable(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn matmul_hand_case_and_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let d = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(d).data(), tape.value(a).data());
        let bad = tape.constant(t(&[3, 2], &[0.0; 6]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[2.0; 4]));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn concat_gap_and_l1() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 2, 3, 3], 1.0));
        let b = tape.constant(Tensor::full(&[1, 3, 3, 3], 2.0));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 3, 3]);
        let g = tape.global_avg_pool(b).unwrap();
        assert_eq!(tape.shape(g), &[1, 3, 1, 1]);
        assert!(tape.value(g).data().iter().all(|&v| v == 2.0));
        let l = tape.l1_mean(a, a).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        assert!(tape.l1_mean(a, b).is_err());
    }

    #[test]
    fn maxpool_window_maxima_and_constant() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &vals));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        // rows: [0 7 14 5] [12 3 10 1] [8 15 6 13] [4 11 2 9]
        assert_eq!(tape.value(y).data(), &[12.0, 14.0, 15.0, 13.0]);
        let c = tape.constant(Tensor::full(&[1, 2, 4, 4], 3.0));
        let y = tape.maxpool2d(c, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
        let odd = tape.constant(Tensor::zeros(&[1, 1, 5, 4]));
        assert!(matches!(tape.maxpool2d(odd, 2, 2), Err(Error::Precondition { .. })));
    }

    #[test]
    fn adaptive_pool_identity_and_global() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64).collect();
        let x = tape.constant(t(&[1, 1, 8, 8], &vals));
        let same = tape.adaptive_maxpool2d(x, 8, 8).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let g = tape.adaptive_maxpool2d(x, 1, 1).unwrap();
        assert_eq!(tape.value(g).data(), &[63.0]);
        assert!(tape.adaptive_maxpool2d(x, 0, 1).is_err());
    }

    #[test]
    fn permute_transposes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
