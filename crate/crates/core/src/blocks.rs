//! Local feature blocks: residual block, feature attention block (FAB), the
//! multi-stream feature attention block (MSFAB) and two ablation variants.
//!
//! Every attention block computes `Z = x + SA(CA(FE(x)))`. The variants differ
//! only in the feature extractor and in whether spatial attention uses
//! pointwise or dilated convolutions:
//!
//! | kind          | FE                            | SA                 |
//! |---------------|-------------------------------|--------------------|
//! | `Fab`         | conv3×3 → ReLU → +x → conv3×3 | two 1×1            |
//! | `ParallelFe`  | three conv3×3 streams         | two 1×1            |
//! | `MsfeSa`      | conv1×1 / conv3×3 / dconv3×3  | two 1×1            |
//! | `Msfab`       | conv1×1 / conv3×3 / dconv3×3  | two dilated 3×3    |
//!
//! Stream extractors concatenate their streams, fuse `3C → C` with a 1×1
//! conv followed by ReLU, add the block input and finish with a 3×3 conv.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Init, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Plain residual block `x + conv(relu(conv(x)))`.
    Rb,
    Fab,
    ParallelFe,
    MsfeSa,
    Msfab,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] = [
        BlockKind::Rb,
        BlockKind::Fab,
        BlockKind::ParallelFe,
        BlockKind::MsfeSa,
        BlockKind::Msfab,
    ];

    pub fn has_attention(self) -> bool {
        self != BlockKind::Rb
    }

    pub fn label(self) -> &'static str {
        match self {
            BlockKind::Rb => "rb",
            BlockKind::Fab => "fab",
            BlockKind::ParallelFe => "parallel_fe",
            BlockKind::MsfeSa => "msfe_sa",
            BlockKind::Msfab => "msfab",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown block kind {s:?}")))
    }

    fn uses_streams(self) -> bool {
        matches!(self, BlockKind::ParallelFe | BlockKind::MsfeSa | BlockKind::Msfab)
    }

    fn dilated_attention(self) -> bool {
        self == BlockKind::Msfab
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub channels: usize,
    pub ca_reduction: usize,
    pub sa_reduction: usize,
}

impl BlockConfig {
    pub fn new(kind: BlockKind, channels: usize) -> Self {
        BlockConfig {
            kind,
            channels,
            ca_reduction: 8,
            sa_reduction: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("block with zero channels".into()));
        }
        if self.kind.has_attention() {
            if self.ca_reduction == 0 || self.channels % self.ca_reduction != 0 {
                return Err(Error::Config(format!(
                    "channels {} not divisible by channel-attention reduction {}",
                    self.channels, self.ca_reduction
                )));
            }
            if self.sa_reduction != 2 || self.channels % self.sa_reduction != 0 {
                return Err(Error::Config(format!(
                    "spatial-attention reduction must be 2 and divide channels {} (got {})",
                    self.channels, self.sa_reduction
                )));
            }
        }
        Ok(())
    }
}

fn check_channels<T: Real>(tape: &Tape<T>, x: Var, channels: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != channels {
        let mut want = s.to_vec();
        if want.len() == 4 {
            want[1] = channels;
        }
        return Err(Error::shape(op, s, &want));
    }
    Ok(())
}

/// `x + conv3×3(relu(conv3×3(x)))`
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub channels: usize,
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let spec = ConvSpec::same(channels, channels, 3, 1);
        Ok(ResBlock {
            channels,
            conv1: Conv::new(store, &format!("{name}.conv1"), spec, Init::FanInUniform, rng)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), spec, Init::FanInUniform, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_channels(tape, x, self.channels, "rb_forward")?;
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Feature extraction part of an attention block.
#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    /// `conv3×3(x + relu(conv3×3(x)))`
    Single { first: Conv, out: Conv },
    /// `conv3×3(x + relu(conv1×1([s_1(x), s_2(x), s_3(x)])))`
    Streams { streams: [Conv; 3], fuse: Conv, out: Conv },
}

impl FeatureExtractor {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, kind: BlockKind, c: usize, rng: &mut R) -> Result<Self> {
        let init = Init::FanInUniform;
        let out = |store: &mut ParamStore<T>, rng: &mut R| Conv::new(store, &format!("{name}.out"), ConvSpec::same(c, c, 3, 1), init, rng);
        if !kind.uses_streams() {
            let first = Conv::new(store, &format!("{name}.conv"), ConvSpec::same(c, c, 3, 1), init, rng)?;
            return Ok(FeatureExtractor::Single {
                first,
                out: out(store, rng)?,
            });
        }
        let specs = if kind == BlockKind::ParallelFe {
            [ConvSpec::same(c, c, 3, 1); 3]
        } else {
            [
                ConvSpec::same(c, c, 1, 1),
                ConvSpec::same(c, c, 3, 1),
                ConvSpec::same(c, c, 3, 2),
            ]
        };
        let mut streams = Vec::with_capacity(3);
        for (i, spec) in specs.into_iter().enumerate() {
            streams.push(Conv::new(store, &format!("{name}.stream{}", i + 1), spec, init, rng)?);
        }
        let fuse = Conv::new(store, &format!("{name}.fuse"), ConvSpec::same(3 * c, c, 1, 1), init, rng)?;
        Ok(FeatureExtractor::Streams {
            streams: streams.try_into().expect("three streams"),
            fuse,
            out: out(store, rng)?,
        })
    }

    /// Outputs of the three parallel streams, before fusion.
    pub fn stream_outputs<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Option<[Var; 3]>> {
        match self {
            FeatureExtractor::Single { .. } => Ok(None),
            FeatureExtractor::Streams { streams, .. } => Ok(Some([
                streams[0].forward(tape, store, x)?,
                streams[1].forward(tape, store, x)?,
                streams[2].forward(tape, store, x)?,
            ])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mid = match self {
            FeatureExtractor::Single { first, .. } => first.forward(tape, store, x)?,
            FeatureExtractor::Streams { fuse, .. } => {
                let s = self.stream_outputs(tape, store, x)?.expect("stream extractor");
                let cat = tape.concat(&s, 1)?;
                fuse.forward(tape, store, cat)?
            }
        };
        let mid = tape.relu(mid);
        let res = tape.add(x, mid)?;
        let out = match self {
            FeatureExtractor::Single { out, .. } | FeatureExtractor::Streams { out, .. } => out,
        };
        out.forward(tape, store, res)
    }
}

/// `y ⊙ σ(conv1×1(relu(conv1×1(GAP(y)))))`, weights broadcast over H, W.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub reduce: Conv,
    pub expand: Conv,
}

impl ChannelAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel attention: {channels} channels not divisible by {reduction}"
            )));
        }
        let mid = channels / reduction;
        Ok(ChannelAttention {
            channels,
            reduce: Conv::new(store, &format!("{name}.reduce"), ConvSpec::same(channels, mid, 1, 1), Init::FanInUniform, rng)?,
            expand: Conv::new(store, &format!("{name}.expand"), ConvSpec::same(mid, channels, 1, 1), Init::FanInUniform, rng)?,
        })
    }

    /// Per-channel weights `[N,C,1,1]` in (0, 1).
    pub fn weights<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        check_channels(tape, y, self.channels, "channel_attention")?;
        let g = tape.global_avg_pool(y)?;
        let h = self.reduce.forward(tape, store, g)?;
        let h = tape.relu(h);
        let h = self.expand.forward(tape, store, h)?;
        Ok(tape.sigmoid(h))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        let w = self.weights(tape, store, y)?;
        tape.mul(y, w)
    }
}

/// `y ⊙ σ(conv(relu(conv(y))))` with a single-channel weight map. The convs
/// are 1×1 (FAB) or 3×3 with dilation 2 (MSFAB); the first reduces `C → C/2`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub channels: usize,
    pub dilated: bool,
    pub reduce: Conv,
    pub project: Conv,
}

impl SpatialAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        dilated: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "spatial attention: {channels} channels not divisible by {reduction}"
            )));
        }
        let mid = channels / reduction;
        let (k, d) = if dilated { (3, 2) } else { (1, 1) };
        Ok(SpatialAttention {
            channels,
            dilated,
            reduce: Conv::new(store, &format!("{name}.reduce"), ConvSpec::same(channels, mid, k, d), Init::FanInUniform, rng)?,
            project: Conv::new(store, &format!("{name}.project"), ConvSpec::same(mid, 1, k, d), Init::FanInUniform, rng)?,
        })
    }

    /// Returns `(intermediate [N,C/2,H,W], weight map [N,1,H,W])`.
    pub fn weight_map<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<(Var, Var)> {
        check_channels(tape, y, self.channels, "spatial_attention")?;
        let h = self.reduce.forward(tape, store, y)?;
        let h = tape.relu(h);
        let m = self.project.forward(tape, store, h)?;
        Ok((h, tape.sigmoid(m)))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        let (_, m) = self.weight_map(tape, store, y)?;
        tape.mul(y, m)
    }
}

/// Any of the block kinds, with its own parameters.
#[derive(Clone, Debug)]
pub enum Block {
    Residual(ResBlock),
    Attention(AttentionBlock),
}

/// `Z = x + SA(CA(FE(x)))`
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub config: BlockConfig,
    pub fe: FeatureExtractor,
    pub ca: ChannelAttention,
    pub sa: SpatialAttention,
}

impl AttentionBlock {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_channels(tape, x, self.config.channels, "attention_block")?;
        let y = self.fe.forward(tape, store, x)?;
        let y = self.ca.forward(tape, store, y)?;
        let y = self.sa.forward(tape, store, y)?;
        tape.add(x, y)
    }
}

impl Block {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, config: BlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        if config.kind == BlockKind::Rb {
            return Ok(Block::Residual(ResBlock::new(store, name, c, rng)?));
        }
        let fe = FeatureExtractor::new(store, &format!("{name}.fe"), config.kind, c, rng)?;
        let ca = ChannelAttention::new(store, &format!("{name}.ca"), c, config.ca_reduction, rng)?;
        let sa = SpatialAttention::new(
            store,
            &format!("{name}.sa"),
            c,
            config.sa_reduction,
            config.kind.dilated_attention(),
            rng,
        )?;
        Ok(Block::Attention(AttentionBlock { config, fe, ca, sa }))
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Residual(_) => BlockKind::Rb,
            Block::Attention(a) => a.config.kind,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            Block::Residual(b) => b.forward(tape, store, x),
            Block::Attention(b) => b.forward(tape, store, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn divisibility_is_validated() {
        let mut cfg = BlockConfig::new(BlockKind::Msfab, 12);
        assert!(cfg.validate().is_err());
        cfg.channels = 16;
        assert!(cfg.validate().is_ok());
        cfg.sa_reduction = 4;
        assert!(cfg.validate().is_err());
        // residual blocks ignore the reductions
        assert!(BlockConfig::new(BlockKind::Rb, 3).validate().is_ok());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let b = Block::new(&mut store, "b", BlockConfig::new(BlockKind::Msfab, 16), &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 8, 8, 8]));
        assert!(matches!(b.forward(&mut tape, &store, x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn every_kind_preserves_shape() {
        for kind in BlockKind::ALL {
            let mut store = ParamStore::<f32>::new();
            let b = Block::new(&mut store, "b", BlockConfig::new(kind, 16), &mut rng()).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[2, 16, 8, 8], 1.0, &mut rng()));
            let y = b.forward(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(y), &[2, 16, 8, 8], "{kind:?}");
        }
    }

    #[test]
    fn parse_labels() {
        assert_eq!(BlockKind::parse("MSFAB").unwrap(), BlockKind::Msfab);
        assert_eq!(BlockKind::parse("parallel-fe").unwrap(), BlockKind::ParallelFe);
        assert!(BlockKind::parse("unet").is_err());
    }
}
