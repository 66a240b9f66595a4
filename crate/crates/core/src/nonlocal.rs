//! Non-local attention over level-3 features.
//!
//! [`NonLocal::nlb_forward`] attends every position of a feature map to every
//! other position. [`NonLocal::cnlb_forward`] takes queries from one map and
//! keys/values from a second (typically the 1×1 fusion of all preceding level-3
//! features, see [`Fusion`]), optionally shrinking the key/value token set with
//! a [`SamplerSpec`]. Both compute
//!
//! ```text
//! out = x + conv1×1(Γ(softmax(Q·K)·V))
//! ```
//!
//! with `Q: [N,Ĉ]`, `K: [Ĉ,S]`, `V: [S,Ĉ]`, unscaled dot products and `Γ` the
//! row-major reshape from tokens back to `[Ĉ,h,w]`. Keys and values are
//! projected before sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Init, ParamStore};
use crate::tensor::Real;

/// How keys and values are reduced before attention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum SamplerSpec {
    /// Every position is a token.
    None,
    /// Adaptive max pools to `s × s` grids.
    Spp { output_sizes: Vec<usize> },
    /// Max pools with `kernel = stride = f`.
    Spds { factors: Vec<usize> },
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec::spds()
    }
}

impl SamplerSpec {
    pub fn spds() -> Self {
        SamplerSpec::Spds { factors: vec![2, 4] }
    }

    pub fn spp() -> Self {
        SamplerSpec::Spp {
            output_sizes: vec![1, 3, 6, 8],
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SamplerSpec::None => "none",
            SamplerSpec::Spp { .. } => "spp",
            SamplerSpec::Spds { .. } => "spds",
        }
    }

    /// Parses `none`, `spp` or `spds` into the default parameterization.
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(SamplerSpec::None),
            "spp" => Ok(SamplerSpec::spp()),
            "spds" => Ok(SamplerSpec::spds()),
            _ => Err(Error::Config(format!("unknown sampler {s:?}"))),
        }
    }

    /// Structural checks independent of the feature-map size.
    pub fn validate(&self) -> Result<()> {
        match self {
            SamplerSpec::None => Ok(()),
            SamplerSpec::Spp { output_sizes } => {
                if output_sizes.is_empty() || output_sizes.contains(&0) {
                    return Err(Error::Config(format!("spp output sizes must be positive: {output_sizes:?}")));
                }
                Ok(())
            }
            SamplerSpec::Spds { factors } => {
                if factors.is_empty() || factors.contains(&0) {
                    return Err(Error::Config(format!("spds factors must be positive: {factors:?}")));
                }
                if factors.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(format!("spds factors must be strictly increasing: {factors:?}")));
                }
                Ok(())
            }
        }
    }

    /// Checks that the sampler applies to an `h × w` map.
    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        match self {
            SamplerSpec::None => Ok(()),
            SamplerSpec::Spp { output_sizes } => match output_sizes.iter().find(|&&s| s > h || s > w) {
                Some(s) => Err(Error::pre("spp_sample", format!("output size {s} exceeds {h}x{w}"))),
                None => Ok(()),
            },
            SamplerSpec::Spds { factors } => match factors.iter().find(|&&f| h % f != 0 || w % f != 0) {
                Some(f) => Err(Error::pre("spds_sample", format!("{h}x{w} not divisible by factor {f}"))),
                None => Ok(()),
            },
        }
    }

    /// Number of key/value tokens `S` for an `h × w` map.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        match self {
            SamplerSpec::None => h * w,
            SamplerSpec::Spp { output_sizes } => output_sizes.iter().map(|s| s * s).sum(),
            SamplerSpec::Spds { factors } => factors.iter().map(|f| (h / f) * (w / f)).sum(),
        }
    }
}

/// Sizes of one attention evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AttentionDims {
    /// Embedding channels `Ĉ`.
    pub embed: usize,
    /// Query tokens `N = h·w`.
    pub queries: usize,
    /// Key/value tokens `S`.
    pub keys: usize,
}

impl AttentionDims {
    pub fn new(embed: usize, h: usize, w: usize, sampler: &SamplerSpec) -> Self {
        AttentionDims {
            embed,
            queries: h * w,
            keys: sampler.token_count(h, w),
        }
    }

    /// Multiplies of `Q·K` plus `A·V`: `2·N·S·Ĉ`.
    pub fn matmul_macs(&self) -> u64 {
        2 * self.queries as u64 * self.keys as u64 * self.embed as u64
    }
}

/// Channel-major tokens `[B,C,S]` from `[B,C,h,w]`.
fn tokens_channel_major<T: Real>(tape: &mut Tape<T>, e: Var, sampler: &SamplerSpec) -> Result<Var> {
    let s = tape.shape(e).to_vec();
    if s.len() != 4 {
        return Err(Error::pre("sample", format!("expected [B,C,h,w], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    sampler.check_dims(h, w)?;
    let pooled: Vec<Var> = match sampler {
        SamplerSpec::None => vec![e],
        SamplerSpec::Spp { output_sizes } => output_sizes
            .iter()
            .map(|&o| tape.adaptive_maxpool2d(e, o, o))
            .collect::<Result<_>>()?,
        SamplerSpec::Spds { factors } => factors.iter().map(|&f| tape.maxpool2d(e, f, f)).collect::<Result<_>>()?,
    };
    let flat: Vec<Var> = pooled
        .into_iter()
        .map(|p| {
            let ps = tape.shape(p);
            let n = ps[2] * ps[3];
            tape.reshape(p, &[b, c, n])
        })
        .collect::<Result<_>>()?;
    if flat.len() == 1 {
        Ok(flat[0])
    } else {
        tape.concat(&flat, 2)
    }
}

/// Token-major `[B,S,C]` tokens after max-pool down-sampling at each factor.
pub fn spds_sample<T: Real>(tape: &mut Tape<T>, e: Var, factors: &[usize]) -> Result<Var> {
    let t = tokens_channel_major(
        tape,
        e,
        &SamplerSpec::Spds {
            factors: factors.to_vec(),
        },
    )?;
    tape.permute(t, &[0, 2, 1])
}

/// Token-major `[B,S,C]` tokens after adaptive max pooling to each size.
pub fn spp_sample<T: Real>(tape: &mut Tape<T>, e: Var, output_sizes: &[usize]) -> Result<Var> {
    let t = tokens_channel_major(
        tape,
        e,
        &SamplerSpec::Spp {
            output_sizes: output_sizes.to_vec(),
        },
    )?;
    tape.permute(t, &[0, 2, 1])
}

/// 1×1 reduction of `sources` concatenated maps back to `channels`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub channels: usize,
    pub sources: usize,
    pub conv: Conv,
}

impl Fusion {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        sources: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if sources == 0 {
            return Err(Error::Config("fusion needs at least one source".into()));
        }
        let spec = ConvSpec::same(channels * sources, channels, 1, 1);
        Ok(Fusion {
            channels,
            sources,
            conv: Conv::new(store, name, spec, Init::FanInUniform, rng)?,
        })
    }

    pub fn fuse_preceding<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: &[Var]) -> Result<Var> {
        let first = features
            .first()
            .ok_or_else(|| Error::pre("fuse_preceding", "empty feature list"))?;
        let shape = tape.shape(*first).to_vec();
        for &f in &features[1..] {
            if tape.shape(f) != shape.as_slice() {
                return Err(Error::shape("fuse_preceding", &shape, tape.shape(f)));
            }
        }
        if features.len() != self.sources {
            return Err(Error::pre(
                "fuse_preceding",
                format!("expected {} features, got {}", self.sources, features.len()),
            ));
        }
        let cat = if features.len() == 1 {
            *first
        } else {
            tape.concat(features, 1)?
        };
        self.conv.forward(tape, store, cat)
    }
}

/// Intermediate values of one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// `Q·K`, `[B,N,S]`.
    pub similarity: Var,
    /// Row-wise softmax of the similarity, `[B,N,S]`.
    pub weights: Var,
    pub output: Var,
}

/// Query/key/value/output projections shared by NLB and CNLB.
#[derive(Clone, Debug)]
pub struct NonLocal {
    pub channels: usize,
    pub embed: usize,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub out: Conv,
}

impl NonLocal {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        embed: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || embed == 0 {
            return Err(Error::Config("non-local block with zero channels".into()));
        }
        let proj = ConvSpec::same(channels, embed, 1, 1);
        let init = Init::FanInUniform;
        Ok(NonLocal {
            channels,
            embed,
            query: Conv::new(store, &format!("{name}.query"), proj, init, rng)?,
            key: Conv::new(store, &format!("{name}.key"), proj, init, rng)?,
            value: Conv::new(store, &format!("{name}.value"), proj, init, rng)?,
            out: Conv::new(store, &format!("{name}.out"), ConvSpec::same(embed, channels, 1, 1), init, rng)?,
        })
    }

    pub fn nlb_forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.attend(tape, store, x, x, &SamplerSpec::None)?.output)
    }

    pub fn cnlb_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        fused: Var,
        sampler: &SamplerSpec,
    ) -> Result<Var> {
        Ok(self.attend(tape, store, query, fused, sampler)?.output)
    }

    /// Full evaluation exposing the similarity and attention matrices.
    pub fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        fused: Var,
        sampler: &SamplerSpec,
    ) -> Result<AttentionTrace> {
        let qs = tape.shape(query).to_vec();
        if qs.len() != 4 || qs[1] != self.channels {
            return Err(Error::shape("non_local", &qs, &[qs.first().copied().unwrap_or(1), self.channels, 0, 0]));
        }
        if tape.shape(fused) != qs.as_slice() {
            return Err(Error::shape("non_local", &qs, tape.shape(fused)));
        }
        let (b, h, w) = (qs[0], qs[2], qs[3]);
        let n = h * w;
        sampler.check_dims(h, w)?;

        let q = self.query.forward(tape, store, query)?;
        let q = tape.reshape(q, &[b, self.embed, n])?;
        let q = tape.permute(q, &[0, 2, 1])?;

        let k = self.key.forward(tape, store, fused)?;
        let k = tokens_channel_major(tape, k, sampler)?;

        let v = self.value.forward(tape, store, fused)?;
        let v = tokens_channel_major(tape, v, sampler)?;
        let v = tape.permute(v, &[0, 2, 1])?;

        let similarity = tape.matmul(q, k)?;
        let weights = tape.softmax(similarity, 2)?;
        let y = tape.matmul(weights, v)?;
        let y = tape.permute(y, &[0, 2, 1])?;
        let y = tape.reshape(y, &[b, self.embed, h, w])?;
        let y = self.out.forward(tape, store, y)?;
        let output = tape.add(query, y)?;
        Ok(AttentionTrace {
            similarity,
            weights,
            output,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn token_counts() {
        assert_eq!(SamplerSpec::spds().token_count(64, 64), 1280);
        assert_eq!(SamplerSpec::spp().token_count(64, 64), 110);
        assert_eq!(SamplerSpec::None.token_count(64, 64), 4096);
        let d = AttentionDims::new(64, 64, 64, &SamplerSpec::spds());
        let full = AttentionDims::new(64, 64, 64, &SamplerSpec::None);
        assert_eq!(d.matmul_macs() as f64 / full.matmul_macs() as f64, 0.3125);
    }

    #[test]
    fn sampler_validation() {
        assert!(SamplerSpec::Spds { factors: vec![4, 2] }.validate().is_err());
        assert!(SamplerSpec::Spds { factors: vec![2, 2] }.validate().is_err());
        assert!(SamplerSpec::Spp { output_sizes: vec![0] }.validate().is_err());
        assert!(SamplerSpec::spds().check_dims(6, 8).is_err());
        assert!(SamplerSpec::spp().check_dims(6, 8).is_err());
        assert!(SamplerSpec::spp().check_dims(8, 8).is_ok());
    }

    #[test]
    fn spds_of_constant_is_constant() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::full(&[1, 3, 8, 8], 0.7));
        let t = spds_sample(&mut tape, e, &[2, 4]).unwrap();
        assert_eq!(tape.shape(t), &[1, 16 + 4, 3]);
        assert!(tape.value(t).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn unit_factor_is_identity_flattening() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let e = tape.constant(x.clone());
        let t = spds_sample(&mut tape, e, &[1]).unwrap();
        let tv = tape.value(t).clone();
        for c in 0..2 {
            for p in 0..16 {
                assert_eq!(tv.data()[p * 2 + c], x.data()[c * 16 + p]);
            }
        }
        let t = spp_sample(&mut tape, e, &[4]).unwrap();
        assert_eq!(tape.value(t), &tv);
    }

    #[test]
    fn fusion_rejects_mismatched_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let f = Fusion::new(&mut store, "fuse", 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(f.fuse_preceding(&mut tape, &store, &[a, b]).is_err());
        assert!(f.fuse_preceding(&mut tape, &store, &[]).is_err());
        assert!(f.fuse_preceding(&mut tape, &store, &[a, a]).is_ok());
    }
}
