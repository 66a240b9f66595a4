use mrfnln::blocks::BlockKind;
use mrfnln::config::RunConfig;
use mrfnln::losses::CrVariant;
use mrfnln::net::{AttentionKind, Preset, Recursion};
use mrfnln::nonlocal::SamplerSpec;
use proptest::prelude::*;

#[test]
fn every_preset_survives_emit_and_reparse() {
    for p in [Preset::B, Preset::L, Preset::Tiny] {
        let cfg = RunConfig::default().with_preset(p);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emitted_config_reparses_identically(
        seed in 0u64..1 << 40,
        lr in 1e-6f64..1e-2,
        beta in 0.0f64..2.0,
        beta_lo in 0.05f32..1.0,
        widen in 0.0f32..1.0,
        depth in 1usize..5,
        kind in 0usize..5,
        sampler in 0usize..3,
        variant in 0usize..4,
        taps in proptest::option::of(proptest::collection::vec(1usize..14, 1..4)),
    ) {
        let mut cfg = RunConfig::default().with_seed(seed);
        cfg.train.lr_init = lr;
        cfg.train.lr_final = lr / 7.0;
        cfg.loss.beta = beta;
        cfg.loss.variant = CrVariant::ALL[variant];
        if let Some(t) = taps {
            cfg.loss.weights = Some(t.iter().map(|&k| 1.0 / k as f64).collect());
            cfg.loss.taps = Some(t);
        }
        cfg.synth.sampling.beta_range = [beta_lo, beta_lo + widen];
        cfg.network.stage_depths[2] = depth;
        cfg.network.encoder_blocks[2] = BlockKind::ALL[kind];
        cfg.network.sampler = [SamplerSpec::None, SamplerSpec::spp(), SamplerSpec::spds()][sampler].clone();
        cfg.network.attention = AttentionKind::CrossNonLocal;
        cfg.network.recursion = if depth % 2 == 0 { Recursion::Independent } else { Recursion::SharedWeights };
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
        prop_assert_eq!(back.content_hash(), cfg.content_hash());
    }
}

#[test]
fn load_names_the_file_on_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[train]\nbatch_size = \"four\"\n").unwrap();
    let err = RunConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("run.toml"), "{err}");
}
