//! Helpers shared by several integration test binaries.
#![allow(dead_code)]

use mrfnln::nn::ParamStore;
use mrfnln::nonlocal::{NonLocal, SamplerSpec};
use mrfnln::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Redraws every parameter at He scale with small random biases. The default
/// init is deliberately quiet, which pushes many true gradients down to the
/// rounding floor of a finite difference; a louder fixture keeps every
/// coordinate informative.
pub fn loud_params(store: &mut ParamStore<f64>, bias_std: f64, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let std = if shape.len() == 4 {
            (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt()
        } else {
            bias_std
        };
        *store.get_mut(id) = Tensor::randn(&shape, std, rng);
    }
}

// Non-local attention written as explicit loops over pixels and tokens. It
// shares no code with the tape implementation.

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain nested `Vec` feature map `[channel][row][col]`.
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_map(t: &Tensor<f64>, batch: usize) -> Map {
    let (_, c, h, w) = t.dims4().unwrap();
    (0..c)
        .map(|ch| {
            (0..h)
                .map(|i| (0..w).map(|j| t.data()[((batch * c + ch) * h + i) * w + j]).collect())
                .collect()
        })
        .collect()
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get(store.find(name).unwrap()).data().to_vec()
}

/// `out[e] = b[e] + Σ_c W[e][c] · x[c]` at every pixel.
pub fn pointwise(x: &Map, w: &[f64], b: &[f64]) -> Map {
    let cin = x.len();
    let (h, wd) = (x[0].len(), x[0][0].len());
    (0..b.len())
        .map(|e| {
            (0..h)
                .map(|i| (0..wd).map(|j| b[e] + (0..cin).map(|c| w[e * cin + c] * x[c][i][j]).sum::<f64>()).collect())
                .collect()
        })
        .collect()
}

/// Token list `[token][channel]` after sampling a projected map.
pub fn tokens(m: &Map, sampler: &SamplerSpec) -> Vec<Vec<f64>> {
    let (h, w) = (m[0].len(), m[0][0].len());
    let window_max = |c: usize, r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut best = f64::NEG_INFINITY;
        for row in &m[c][r0..r1] {
            for &v in &row[c0..c1] {
                best = best.max(v);
            }
        }
        best
    };
    let mut out = Vec::new();
    match sampler {
        SamplerSpec::None => {
            for i in 0..h {
                for j in 0..w {
                    out.push((0..m.len()).map(|c| m[c][i][j]).collect());
                }
            }
        }
        SamplerSpec::Spds { factors } => {
            for &f in factors {
                for bi in 0..h / f {
                    for bj in 0..w / f {
                        out.push((0..m.len()).map(|c| window_max(c, bi * f, bi * f + f, bj * f, bj * f + f)).collect());
                    }
                }
            }
        }
        SamplerSpec::Spp { output_sizes } => {
            for &s in output_sizes {
                for bi in 0..s {
                    for bj in 0..s {
                        let (r0, r1) = (bi * h / s, ((bi + 1) * h).div_ceil(s));
                        let (c0, c1) = (bj * w / s, ((bj + 1) * w).div_ceil(s));
                        out.push((0..m.len()).map(|c| window_max(c, r0, r1, c0, c1)).collect());
                    }
                }
            }
        }
    }
    out
}

pub struct Oracle {
    pub output: Map,
    /// Attention rows, `[query][token]`.
    pub weights: Vec<Vec<f64>>,
}

pub fn oracle(store: &ParamStore<f64>, prefix: &str, query: &Map, fused: &Map, sampler: &SamplerSpec) -> Oracle {
    let p = |n: &str| param(store, &format!("{prefix}.{n}"));
    let q = pointwise(query, &p("query.weight"), &p("query.bias"));
    let k = tokens(&pointwise(fused, &p("key.weight"), &p("key.bias")), sampler);
    let v = tokens(&pointwise(fused, &p("value.weight"), &p("value.bias")), sampler);
    let (h, w) = (query[0].len(), query[0][0].len());
    let embed = q.len();

    let mut y = vec![vec![vec![0.0; w]; h]; embed];
    let mut weights = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let logits: Vec<f64> = k.iter().map(|kt| (0..embed).map(|e| q[e][i][j] * kt[e]).sum()).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let a: Vec<f64> = exps.iter().map(|e| e / z).collect();
            for e in 0..embed {
                y[e][i][j] = a.iter().zip(&v).map(|(at, vt)| at * vt[e]).sum();
            }
            weights.push(a);
        }
    }
    let mut output = pointwise(&y, &p("out.weight"), &p("out.bias"));
    for (c, plane) in output.iter_mut().enumerate() {
        for (i, row) in plane.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += query[c][i][j];
            }
        }
    }
    Oracle { output, weights }
}

pub fn max_diff(t: &Tensor<f64>, batch: usize, m: &Map) -> f64 {
    let got = to_map(t, batch);
    got.iter()
        .flatten()
        .flatten()
        .zip(m.iter().flatten().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn setup(seed: u64, channels: usize, embed: usize) -> (ParamStore<f64>, NonLocal) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let nl = NonLocal::new(&mut store, "nl", channels, embed, &mut r).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".bias") {
            *store.get_mut(id) = Tensor::randn(store.get(id).shape(), 0.2, &mut r);
        }
    }
    (store, nl)
}

