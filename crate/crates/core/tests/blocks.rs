use mrfnln::blocks::{Block, BlockConfig, BlockKind, ChannelAttention, FeatureExtractor, ResBlock, SpatialAttention};
use mrfnln::nn::ParamStore;
use mrfnln::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn zero_params(store: &mut ParamStore<f64>, prefix: &str) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).starts_with(prefix) {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

fn run<F>(x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Tape<f64>, Var) -> mrfnln::Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv).unwrap();
    tape.value(y).clone()
}

/// Same-padded 3×3 convolution written out directly, weights `[Cout,Cin,3,3]`.
fn conv3x3_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let cout = w.shape()[0];
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    for bi in 0..n {
        for o in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (y, xx) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += w.data()[((o * cin + c) * 3 + di) * 3 + dj]
                                        * x.data()[((bi * cin + c) * h + y as usize) * wd + xx as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + o) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn residual_block_is_identity_at_zero_weights() {
    let mut store = ParamStore::<f64>::new();
    let rb = ResBlock::new(&mut store, "rb", 32, &mut rng(1)).unwrap();
    zero_params(&mut store, "rb");
    let x = Tensor::randn(&[2, 32, 16, 16], 1.0, &mut rng(2));
    let y = run(&x, |t, v| rb.forward(t, &store, v));
    assert_eq!(y, x);
}

#[test]
fn every_kind_is_identity_when_feature_extraction_is_zero() {
    for kind in BlockKind::ALL {
        let mut store = ParamStore::<f64>::new();
        let block = Block::new(&mut store, "b", BlockConfig::new(kind, 16), &mut rng(3)).unwrap();
        let x = Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng(4));
        // attention parameters stay random; only the extractor is zeroed
        let prefix = if kind == BlockKind::Rb { "b." } else { "b.fe." };
        zero_params(&mut store, prefix);
        assert_eq!(run(&x, |t, v| block.forward(t, &store, v)), x, "{kind:?}");
        zero_params(&mut store, "b.");
        assert_eq!(run(&x, |t, v| block.forward(t, &store, v)), x, "{kind:?} all zero");
    }
}

fn msfe(store: &mut ParamStore<f64>, c: usize, seed: u64) -> FeatureExtractor {
    match Block::new(store, "m", BlockConfig::new(BlockKind::Msfab, c), &mut rng(seed)).unwrap() {
        Block::Attention(a) => a.fe,
        Block::Residual(_) => unreachable!(),
    }
}

#[test]
fn zero_fusion_leaves_only_the_output_conv() {
    let mut store = ParamStore::<f64>::new();
    let fe = msfe(&mut store, 8, 5);
    zero_params(&mut store, "m.fe.fuse");
    let b_id = store.find("m.fe.out.bias").unwrap();
    *store.get_mut(b_id) = Tensor::randn(&[8], 0.3, &mut rng(6));
    let x = Tensor::randn(&[1, 8, 6, 7], 1.0, &mut rng(7));
    let y = run(&x, |t, v| fe.forward(t, &store, v));
    let w = store.get(store.find("m.fe.out.weight").unwrap());
    let expect = conv3x3_oracle(&x, w, store.get(b_id));
    assert!(y.max_abs_diff(&expect) < 1e-12);
}

/// Spatial offsets (relative to the impulse) where any output channel is non-zero.
fn support(y: &Tensor<f64>, centre: (usize, usize)) -> Vec<(isize, isize)> {
    let (_, c, h, w) = y.dims4().unwrap();
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if (0..c).any(|ch| y.data()[(ch * h + i) * w + j] != 0.0) {
                out.push((i as isize - centre.0 as isize, j as isize - centre.1 as isize));
            }
        }
    }
    out
}

fn impulse(c: usize, size: usize, channel: usize) -> Tensor<f64> {
    let mut x = Tensor::zeros(&[1, c, size, size]);
    x.data_mut()[(channel * size + size / 2) * size + size / 2] = 1.0;
    x
}

#[test]
fn stream_receptive_fields_are_one_three_and_five() {
    let mut store = ParamStore::<f64>::new();
    let fe = msfe(&mut store, 8, 8);
    let x = impulse(8, 11, 3);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let streams = fe.stream_outputs(&mut tape, &store, xv).unwrap().unwrap();
    let supports: Vec<_> = streams.iter().map(|&s| support(tape.value(s), (5, 5))).collect();

    assert_eq!(supports[0], vec![(0, 0)]);
    let three: Vec<_> = (-1..=1).flat_map(|i| (-1..=1).map(move |j| (i, j))).collect();
    assert_eq!(supports[1], three);
    let dilated: Vec<_> = [-2, 0, 2].iter().flat_map(|&i| [-2, 0, 2].map(move |j| (i, j))).collect();
    assert_eq!(supports[2], dilated);

    let widths: Vec<isize> = supports
        .iter()
        .map(|s| s.iter().map(|p| p.0).max().unwrap() - s.iter().map(|p| p.0).min().unwrap() + 1)
        .collect();
    assert_eq!(supports.iter().map(Vec::len).collect::<Vec<_>>(), [1, 9, 9]);
    assert_eq!(widths, [1, 3, 5]);
}

#[test]
fn channel_attention_at_zero_inner_weights_halves() {
    let mut store = ParamStore::<f64>::new();
    let ca = ChannelAttention::new(&mut store, "ca", 16, 8, &mut rng(9)).unwrap();
    zero_params(&mut store, "ca");
    let y = Tensor::randn(&[2, 16, 5, 5], 1.0, &mut rng(10));
    let out = run(&y, |t, v| ca.forward(t, &store, v));
    assert_eq!(out, y.map(|v| 0.5 * v));
}

#[test]
fn channel_attention_treats_identical_channels_alike() {
    let mut store = ParamStore::<f64>::new();
    let ca = ChannelAttention::new(&mut store, "ca", 8, 4, &mut rng(11)).unwrap();
    // symmetric expansion rows for channels 0 and 1
    let e = store.find("ca.expand.weight").unwrap();
    let mut w = store.get(e).clone();
    let row: Vec<f64> = w.data()[..2].to_vec();
    w.data_mut()[2..4].copy_from_slice(&row);
    *store.get_mut(e) = w;
    let mut y = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut rng(12));
    let plane: Vec<f64> = y.data()[..16].to_vec();
    y.data_mut()[16..32].copy_from_slice(&plane);
    let mut tape = Tape::new();
    let yv = tape.constant(y);
    let wv = ca.weights(&mut tape, &store, yv).unwrap();
    let w = tape.value(wv).data();
    assert_eq!(w[0], w[1]);
}

#[test]
fn spatial_attention_map_is_single_channel() {
    for dilated in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let sa = SpatialAttention::new(&mut store, "sa", 16, 2, dilated, &mut rng(13)).unwrap();
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::randn(&[2, 16, 9, 9], 1.0, &mut rng(14)));
        let (mid, map) = sa.weight_map(&mut tape, &store, y).unwrap();
        assert_eq!(tape.shape(mid), &[2, 8, 9, 9]);
        assert_eq!(tape.shape(map), &[2, 1, 9, 9]);
        assert!(tape.value(map).data().iter().all(|&m| m > 0.0 && m < 1.0));
    }
}

/// Largest Chebyshev distance from the centre at which the weight map reacts
/// to an impulse added to a random input.
fn map_dependence_radius(sa: &SpatialAttention, store: &ParamStore<f64>) -> usize {
    let size = 15;
    let base = Tensor::<f64>::randn(&[1, 8, size, size], 1.0, &mut rng(15)).map(|v| v.abs() + 0.1);
    let mut bumped = base.clone();
    for (a, b) in bumped.data_mut().iter_mut().zip(impulse(8, size, 2).data()) {
        *a += b;
    }
    let map = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let (_, m) = sa.weight_map(&mut tape, store, v).unwrap();
        tape.value(m).clone()
    };
    let diff = map(&bumped).data().iter().zip(map(&base).data()).map(|(a, b)| a - b).collect();
    let diff = Tensor::new(&[1, 1, size, size], diff).unwrap();
    support(&diff, (7, 7))
        .iter()
        .map(|&(i, j)| i.unsigned_abs().max(j.unsigned_abs()))
        .max()
        .unwrap()
}

#[test]
fn dilated_spatial_attention_sees_a_nine_by_nine_window() {
    let mut store = ParamStore::<f64>::new();
    let pointwise = SpatialAttention::new(&mut store, "p", 8, 2, false, &mut rng(16)).unwrap();
    let dilated = SpatialAttention::new(&mut store, "d", 8, 2, true, &mut rng(17)).unwrap();
    // positive biases keep every ReLU open so the support is not truncated
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("reduce.bias") {
            store.get_mut(id).data_mut().fill(50.0);
        }
    }
    assert_eq!(map_dependence_radius(&pointwise, &store), 0);
    assert_eq!(map_dependence_radius(&dilated, &store), 4);
}

fn block_params(kind: BlockKind, c: usize) -> usize {
    let mut store = ParamStore::<f32>::new();
    Block::new(&mut store, "b", BlockConfig::new(kind, c), &mut rng(0)).unwrap();
    store.count()
}

#[test]
fn parameter_counts_follow_conv_arithmetic() {
    let c = 128;
    let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
    let ca = conv(1, c, c / 8) + conv(1, c / 8, c);
    let fab = 2 * conv(3, c, c) + ca + conv(1, c, c / 2) + conv(1, c / 2, 1);
    let msfab = conv(1, c, c) + 2 * conv(3, c, c) + conv(1, 3 * c, c) + conv(3, c, c) + ca + conv(3, c, c / 2) + conv(3, c / 2, 1);
    assert_eq!(block_params(BlockKind::Fab, c), fab);
    assert_eq!(block_params(BlockKind::Msfab, c), msfab);
    // frozen regression constants
    assert_eq!(fab, 307_729);
    assert_eq!(msfab, 587_153);
    assert!(msfab > fab);
    assert_eq!(block_params(BlockKind::Rb, c), 2 * conv(3, c, c));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blocks_preserve_shape_and_attention_stays_in_unit_interval(
        seed in 0u64..1000,
        kind_idx in 0usize..5,
        h in 3usize..9,
        w in 3usize..9,
        n in 1usize..3,
    ) {
        let kind = BlockKind::ALL[kind_idx];
        let mut store = ParamStore::<f64>::new();
        let block = Block::new(&mut store, "b", BlockConfig::new(kind, 8), &mut rng(seed)).unwrap();
        let x = Tensor::randn(&[n, 8, h, w], 2.0, &mut rng(seed + 1));
        let y = run(&x, |t, v| block.forward(t, &store, v));
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());

        let mut s2 = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut s2, "ca", 8, 8, &mut rng(seed)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = ca.weights(&mut tape, &s2, xv).unwrap();
        prop_assert!(tape.value(wv).data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}
