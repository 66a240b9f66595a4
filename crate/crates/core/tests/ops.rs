use mrfnln::{ConvSpec, Error, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> mrfnln::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, spec)?;
    Ok(tape.value(y).clone())
}

fn conv_t(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> mrfnln::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv_transpose2d(xv, wv, None, spec)?;
    Ok(tape.value(y).clone())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn pointwise_identity_kernel() {
    let x = Tensor::randn(&[2, 4, 5, 3], 1.0, &mut rng(1));
    let eye = Tensor::from_fn(&[4, 4, 1, 1], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    assert_eq!(conv(&x, &eye, &ConvSpec::same(4, 4, 1, 1)).unwrap(), x);
}

#[test]
fn box_sum_of_ones() {
    let x = Tensor::full(&[1, 1, 4, 4], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = conv(&x, &w, &ConvSpec::same(1, 1, 3, 1)).unwrap();
    #[rustfmt::skip]
    let expect = [
        4.0, 6.0, 6.0, 4.0,
        6.0, 9.0, 9.0, 6.0,
        6.0, 9.0, 9.0, 6.0,
        4.0, 6.0, 6.0, 4.0,
    ];
    assert_eq!(y.data(), &expect);
}

#[test]
fn down_then_up_restores_spatial_dims() {
    for k in [3, 4] {
        let down = ConvSpec::strided(2, 4, k, 2, 1);
        let up = ConvSpec::strided(4, 2, 4, 2, 1);
        let x = Tensor::randn(&[1, 2, 16, 12], 1.0, &mut rng(2));
        let d = conv(&x, &Tensor::randn(&[4, 2, k, k], 1.0, &mut rng(3)), &down).unwrap();
        assert_eq!(d.shape(), &[1, 4, 8, 6]);
        let u = conv_t(&d, &Tensor::randn(&[4, 2, 4, 4], 1.0, &mut rng(4)), &up).unwrap();
        assert_eq!(u.shape(), &[1, 2, 16, 12]);
    }
}

#[test]
fn conv_channel_mismatch_is_reported() {
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    let w = Tensor::zeros(&[2, 4, 3, 3]);
    assert!(matches!(
        conv(&x, &w, &ConvSpec::same(3, 2, 3, 1)),
        Err(Error::ShapeMismatch { .. })
    ));
    let x = Tensor::zeros(&[1, 1, 2, 2]);
    let w = Tensor::zeros(&[1, 1, 3, 3]);
    assert!(conv(&x, &w, &ConvSpec::strided(1, 1, 3, 1, 0)).is_err());
}

#[test]
fn maxpool_requires_divisible_dims() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 5, 4]));
    assert!(matches!(tape.maxpool2d(x, 2, 2), Err(Error::Precondition { .. })));
    assert!(tape.adaptive_maxpool2d(x, 0, 1).is_err());
}

#[test]
fn adaptive_pool_matches_window_enumeration() {
    let x = Tensor::from_fn(&[1, 1, 6, 6], |i| ((i * 37) % 36) as f64);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let y = tape.adaptive_maxpool2d(xv, 4, 4).unwrap();
    for oi in 0..4usize {
        for oj in 0..4usize {
            let (r0, r1) = (oi * 6 / 4, ((oi + 1) * 6).div_ceil(4));
            let (c0, c1) = (oj * 6 / 4, ((oj + 1) * 6).div_ceil(4));
            let mut best = f64::MIN;
            for r in r0..r1 {
                for c in c0..c1 {
                    best = best.max(x.data()[r * 6 + c]);
                }
            }
            assert_eq!(tape.value(y).data()[oi * 4 + oj], best);
        }
    }
}

#[test]
fn incompatible_elementwise_shapes_name_both() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let b = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let err = tape.mul(a, b).unwrap_err().to_string();
    assert!(err.contains("[1, 3, 4, 4]") && err.contains("[1, 2, 4, 4]"), "{err}");
    let m = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.matmul(m, m).is_err());
}

#[test]
fn softmax_shift_by_a_thousand() {
    let row = Tensor::randn(&[3, 7], 1.0, &mut rng(5));
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(row.clone());
    let b = tape.constant(row.map(|v| v + 1000.0));
    let sa = tape.softmax(a, 1).unwrap();
    let sb = tape.softmax(b, 1).unwrap();
    assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
}

/// Specs for which `conv_transpose` with the same weights is the exact adjoint
/// of `conv` on the sizes used below.
fn adjoint_specs() -> Vec<(ConvSpec, usize, usize)> {
    vec![
        (ConvSpec::same(3, 5, 3, 1), 6, 7),
        (ConvSpec::same(3, 5, 3, 2), 8, 6),
        (ConvSpec::same(4, 2, 1, 1), 5, 5),
        (ConvSpec::strided(3, 4, 4, 2, 1), 8, 6),
        (ConvSpec::strided(2, 3, 3, 1, 0), 6, 5),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_and_transpose_are_adjoint(seed in 0u64..10_000, which in 0usize..5, batch in 1usize..3) {
        let (spec, h, w) = adjoint_specs()[which];
        let mut r = rng(seed);
        let x = Tensor::randn(&[batch, spec.in_ch, h, w], 1.0, &mut r);
        let wt = Tensor::randn(&[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel], 1.0, &mut r);
        let y_shape = conv(&x, &wt, &spec).unwrap().shape().to_vec();
        let y = Tensor::randn(&y_shape, 1.0, &mut r);
        let t_spec = ConvSpec { in_ch: spec.out_ch, out_ch: spec.in_ch, ..spec };
        let back = conv_t(&y, &wt, &t_spec).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let lhs = dot(&conv(&x, &wt, &spec).unwrap(), &y);
        let rhs = dot(&x, &back);
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn softmax_slices_sum_to_one(seed in 0u64..10_000, rows in 1usize..5, len in 1usize..40, scale in 0.1f64..50.0) {
        let x = Tensor::randn(&[rows, len, 2], scale, &mut rng(seed));
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let y = tape.softmax(xv, 1).unwrap();
        let yv = tape.value(y);
        for r in 0..rows {
            for k in 0..2 {
                let s: f64 = (0..len).map(|i| yv.data()[(r * len + i) * 2 + k]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
        prop_assert!(yv.data().iter().all(|&v| v >= 0.0));
        let shifted = tape.constant(x.map(|v| v + 7.5));
        let ys = tape.softmax(shifted, 1).unwrap();
        prop_assert!(tape.value(ys).max_abs_diff(tape.value(y)) < 1e-12);
    }

    #[test]
    fn forward_ops_keep_finite_inputs_finite(seed in 0u64..10_000, h in 2usize..9, w in 2usize..9) {
        let mut r = rng(seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(&[1, 2, 2 * h, 2 * w], 10.0, &mut r));
        let wt = tape.constant(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r));
        let c = tape.conv2d(x, wt, None, &ConvSpec::same(2, 3, 3, 2)).unwrap();
        let p = tape.maxpool2d(c, 2, 2).unwrap();
        let s = tape.sigmoid(p);
        let g = tape.global_avg_pool(s).unwrap();
        let m = tape.mul(p, g).unwrap();
        let f = tape.reshape(m, &[3, h * w]).unwrap();
        let sm = tape.softmax(f, 1).unwrap();
        prop_assert!(tape.value(sm).is_finite());
    }

    #[test]
    fn parallel_and_sequential_kernels_agree_bitwise(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[2, 4, 12, 10], 1.0, &mut r);
        let wt = Tensor::randn(&[6, 4, 3, 3], 1.0, &mut r);
        let spec = ConvSpec::same(4, 6, 3, 2);
        mrfnln::exec::set_sequential(true);
        let a = conv(&x, &wt, &spec).unwrap();
        mrfnln::exec::set_sequential(false);
        let b = conv(&x, &wt, &spec).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}
