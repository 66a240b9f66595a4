//! The three-level encoder/decoder dehazing network.
//!
//! ```text
//! pad → head ─ stage1 ─ down ─ stage2 ─ down ─ stage3 ─ attention ─ up ─(+)─ stage4 ─ up ─(+)─ stage5 ─ tail → crop
//!                 └──────────────────────────┼───────────────────────────┼──────┘               │
//!                                            └───────────────────────────┴──────────────────────┘
//! ```
//!
//! Levels run at `C`, `2C` and `4C` channels. Inputs are reflect-padded on the
//! bottom/right to a multiple of 16 and the output is cropped back.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{Block, BlockConfig, BlockKind};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Init, ParamStore};
use crate::nonlocal::{Fusion, NonLocal, SamplerSpec};
use crate::tensor::{Real, Tensor};

/// Inputs are padded to a multiple of this before the encoder.
pub const SIZE_MULTIPLE: usize = 16;

/// How a level's stack of `N_i` blocks is parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recursion {
    /// One block per level applied `N_i` times.
    #[default]
    SharedWeights,
    Independent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    /// Self-attention on the last level-3 feature.
    NonLocal,
    /// Queries from the last level-3 feature, keys/values from the fusion of all of them.
    #[default]
    CrossNonLocal,
}

impl AttentionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AttentionKind::None),
            "nl" | "nlb" | "non_local" => Ok(AttentionKind::NonLocal),
            "cnl" | "cnlb" | "cross_non_local" => Ok(AttentionKind::CrossNonLocal),
            _ => Err(Error::Config(format!("unknown attention kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    #[default]
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    B,
    L,
    Tiny,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "b" => Ok(Preset::B),
            "l" => Ok(Preset::L),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected B, L or tiny)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    /// Blocks per stage: three encoder levels then two decoder levels.
    pub stage_depths: [usize; 5],
    pub encoder_blocks: [BlockKind; 3],
    pub decoder_blocks: [BlockKind; 2],
    pub attention: AttentionKind,
    pub sampler: SamplerSpec,
    pub recursion: Recursion,
    pub skip_mode: SkipMode,
    /// Adds the input to the output when set.
    pub global_residual: bool,
    pub ca_reduction: usize,
    pub sa_reduction: usize,
    /// Down-sampling conv kernel, 3 or 4 (stride 2, padding 1).
    pub down_kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::preset(Preset::B)
    }
}

impl NetworkConfig {
    pub fn preset(p: Preset) -> Self {
        let (c, depths) = match p {
            Preset::B => (32, [1, 2, 4, 2, 1]),
            Preset::L => (32, [2, 4, 8, 4, 2]),
            Preset::Tiny => (8, [1, 1, 2, 1, 1]),
        };
        NetworkConfig {
            base_channels: c,
            stage_depths: depths,
            encoder_blocks: [BlockKind::Rb, BlockKind::Rb, BlockKind::Msfab],
            decoder_blocks: [BlockKind::Rb, BlockKind::Rb],
            attention: AttentionKind::CrossNonLocal,
            sampler: SamplerSpec::spds(),
            recursion: Recursion::SharedWeights,
            skip_mode: SkipMode::Additive,
            global_residual: false,
            ca_reduction: 8,
            sa_reduction: 2,
            down_kernel: 4,
        }
    }

    /// Preset B with FAB at level 3 and no non-local attention.
    pub fn base_analog() -> Self {
        let mut cfg = NetworkConfig::preset(Preset::B);
        cfg.encoder_blocks[2] = BlockKind::Fab;
        cfg.attention = AttentionKind::None;
        cfg
    }

    pub fn use_cnlb(&self) -> bool {
        self.attention == AttentionKind::CrossNonLocal
    }

    /// Level-3 features concatenated by the cross non-local fusion.
    pub fn fusion_source_count(&self) -> usize {
        self.stage_depths[2]
    }

    /// Channels at stage `i` (0-based, encoder 0..3 then decoder 3..5).
    pub fn stage_channels(&self, i: usize) -> usize {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 2 * c, c][i]
    }

    pub fn stage_kind(&self, i: usize) -> BlockKind {
        if i < 3 {
            self.encoder_blocks[i]
        } else {
            self.decoder_blocks[i - 3]
        }
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        BlockConfig {
            kind: self.stage_kind(stage),
            channels: self.stage_channels(stage),
            ca_reduction: self.ca_reduction,
            sa_reduction: self.sa_reduction,
        }
    }

    /// Channels of the attention embedding `Ĉ = 2C`.
    pub fn embed_channels(&self) -> usize {
        2 * self.base_channels
    }

    pub fn down_spec(&self, in_ch: usize) -> ConvSpec {
        ConvSpec::strided(in_ch, 2 * in_ch, self.down_kernel, 2, 1)
    }

    pub fn up_spec(&self, in_ch: usize) -> ConvSpec {
        ConvSpec::strided(in_ch, in_ch / 2, 4, 2, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if let Some(i) = self.stage_depths.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("stage {} has depth 0", i + 1)));
        }
        if ![3, 4].contains(&self.down_kernel) {
            return Err(Error::Config(format!("down_kernel must be 3 or 4, got {}", self.down_kernel)));
        }
        for i in 0..5 {
            self.block_config(i)
                .validate()
                .map_err(|e| Error::Config(format!("stage {}: {e}", i + 1)))?;
        }
        self.sampler.validate()?;
        Ok(())
    }
}

/// One level's block stack.
#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<Block>,
    repeats: usize,
}

impl Stage {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &NetworkConfig, i: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let depth = cfg.stage_depths[i];
        let bc = cfg.block_config(i);
        Ok(match cfg.recursion {
            Recursion::SharedWeights => Stage {
                blocks: vec![Block::new(store, &format!("{name}.block"), bc, rng)?],
                repeats: depth,
            },
            Recursion::Independent => Stage {
                blocks: (0..depth)
                    .map(|j| Block::new(store, &format!("{name}.block{j}"), bc, rng))
                    .collect::<Result<_>>()?,
                repeats: 1,
            },
        })
    }

    /// Runs the stack, returning the output of every block application.
    fn run<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.blocks.len() * self.repeats);
        for b in &self.blocks {
            for _ in 0..self.repeats {
                x = b.forward(tape, store, x)?;
                outs.push(x);
            }
        }
        Ok(outs)
    }
}

#[derive(Clone, Debug)]
enum LevelAttention {
    NonLocal(NonLocal),
    Cross { fusion: Fusion, block: NonLocal },
}

/// Layer structure of a model; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    head: Conv,
    stages: Vec<Stage>,
    down: [Conv; 2],
    up: [Conv; 2],
    attention: Option<LevelAttention>,
    tail: Conv,
}

impl Network {
    pub fn build<T: Real>(config: &NetworkConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = config.base_channels;
        let init = Init::FanInUniform;

        let head = Conv::new(store, "head", ConvSpec::same(3, c, 3, 1), init, rng)?;
        let mut stages = Vec::with_capacity(5);
        stages.push(Stage::new(store, "enc1", config, 0, rng)?);
        let down1 = Conv::new(store, "down1", config.down_spec(c), init, rng)?;
        stages.push(Stage::new(store, "enc2", config, 1, rng)?);
        let down2 = Conv::new(store, "down2", config.down_spec(2 * c), init, rng)?;
        stages.push(Stage::new(store, "enc3", config, 2, rng)?);
        let attention = match config.attention {
            AttentionKind::None => None,
            AttentionKind::NonLocal => Some(LevelAttention::NonLocal(NonLocal::new(
                store,
                "attn.nl",
                4 * c,
                config.embed_channels(),
                rng,
            )?)),
            AttentionKind::CrossNonLocal => Some(LevelAttention::Cross {
                fusion: Fusion::new(store, "attn.fusion", 4 * c, config.fusion_source_count(), rng)?,
                block: NonLocal::new(store, "attn.nl", 4 * c, config.embed_channels(), rng)?,
            }),
        };
        let up1 = Conv::new_transposed(store, "up1", config.up_spec(4 * c), init, rng)?;
        stages.push(Stage::new(store, "dec2", config, 3, rng)?);
        let up2 = Conv::new_transposed(store, "up2", config.up_spec(2 * c), init, rng)?;
        stages.push(Stage::new(store, "dec1", config, 4, rng)?);
        let tail = Conv::new(store, "tail", ConvSpec::same(c, 3, 3, 1), init, rng)?;

        Ok(Network {
            config: config.clone(),
            head,
            stages,
            down: [down1, down2],
            up: [up1, up2],
            attention,
            tail,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Maps `[N,3,H,W]` hazy images to `[N,3,H,W]` predictions.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        let s = tape.shape(input).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::pre("forward", format!("expected [N,3,H,W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if h < SIZE_MULTIPLE || w < SIZE_MULTIPLE {
            return Err(Error::pre("forward", format!("input {h}x{w} smaller than {SIZE_MULTIPLE}x{SIZE_MULTIPLE}")));
        }
        let pad = |d: usize| (SIZE_MULTIPLE - d % SIZE_MULTIPLE) % SIZE_MULTIPLE;
        let x = if pad(h) + pad(w) > 0 {
            tape.reflect_pad(input, pad(h), pad(w))?
        } else {
            input
        };

        let f0 = self.head.forward(tape, store, x)?;
        let f1 = last(self.stages[0].run(tape, store, f0)?);
        let d1 = self.down[0].forward(tape, store, f1)?;
        let f2 = last(self.stages[1].run(tape, store, d1)?);
        let d2 = self.down[1].forward(tape, store, f2)?;
        let level3 = self.stages[2].run(tape, store, d2)?;
        let f3 = *level3.last().expect("positive depth");
        let f3 = match &self.attention {
            None => f3,
            Some(LevelAttention::NonLocal(nl)) => nl.nlb_forward(tape, store, f3)?,
            Some(LevelAttention::Cross { fusion, block }) => {
                let fused = fusion.fuse_preceding(tape, store, &level3)?;
                block.cnlb_forward(tape, store, f3, fused, &self.config.sampler)?
            }
        };
        let u1 = self.up[0].forward(tape, store, f3)?;
        let u1 = tape.add(u1, f2)?;
        let f4 = last(self.stages[3].run(tape, store, u1)?);
        let u2 = self.up[1].forward(tape, store, f4)?;
        let u2 = tape.add(u2, f1)?;
        let f5 = last(self.stages[4].run(tape, store, u2)?);
        let mut out = self.tail.forward(tape, store, f5)?;
        if self.config.global_residual {
            out = tape.add(out, x)?;
        }
        if pad(h) + pad(w) > 0 {
            out = tape.crop(out, h, w)?;
        }
        Ok(out)
    }
}

fn last(v: Vec<Var>) -> Var {
    *v.last().expect("positive depth")
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub network: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Deterministic fan-in uniform initialisation from `seed`; biases start at zero.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let network = Network::build(config, &mut params, seed)?;
        Ok(Model { network, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.network.config()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        self.network.forward(tape, &self.params, input)
    }

    /// Forward pass outside of training; `clamp` limits the output to `[0, 1]`.
    pub fn predict(&self, input: &Tensor<T>, clamp: bool) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, x)?;
        let out = tape.value(y).clone();
        Ok(if clamp {
            out.map(|v| v.max(T::zero()).min(T::one()))
        } else {
            out
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.iter().map(|(n, t)| (n.to_owned(), t.cast())).collect(),
            extras: Vec::new(),
        }
    }

    /// Builds `config` and overwrites its parameters from `ck`.
    pub fn from_checkpoint(config: &NetworkConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::build(config, 0)?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(config: &NetworkConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint(config, &Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::B, Preset::L, Preset::Tiny] {
            NetworkConfig::preset(p).validate().unwrap();
        }
        NetworkConfig::base_analog().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = NetworkConfig::preset(Preset::B);
        cfg.stage_depths[3] = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::preset(Preset::B);
        cfg.base_channels = 4;
        cfg.encoder_blocks[0] = BlockKind::Fab;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn preset_parse() {
        assert_eq!(Preset::parse("b").unwrap(), Preset::B);
        assert_eq!(Preset::parse("TINY").unwrap(), Preset::Tiny);
        assert!(Preset::parse("xl").is_err());
    }
}
