//! Reconstruction loss and contrastive regularization in the feature space of
//! a small hazy-vs-clean classifier.
//!
//! The regularizer pulls the restored image `O` toward the clean target `J`
//! and pushes it away from the hazy input `I`:
//! `Σ wᵢ · L1(φᵢ(J), φᵢ(O)) / (L1(φᵢ(I), φᵢ(O)) + ε)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, EXTRA_PREFIX};
use crate::data::{self, Augment};
use crate::error::{Error, Result};
use crate::haze::ImagePair;
use crate::nn::{Conv, ConvSpec, Init, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

/// Layer layout of the feature extractor: conv count and width per stage,
/// with 2×2 max pooling between stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub stage_layers: Vec<usize>,
    pub stage_widths: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            stage_layers: vec![2, 2, 3, 3, 3],
            stage_widths: vec![16, 32, 64, 64, 64],
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_layers.is_empty()
            || self.stage_layers.len() != self.stage_widths.len()
            || self.stage_layers.contains(&0)
            || self.stage_widths.contains(&0)
        {
            return Err(Error::Config(format!("bad extractor layout {self:?}")));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.stage_layers.iter().sum()
    }
}

/// Conv stack whose post-ReLU outputs are the feature taps (1-based), plus a
/// pooled 1×1 classification head used only while training it.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Real> {
    pub config: ExtractorConfig,
    pub params: ParamStore<T>,
    layers: Vec<Conv>,
    /// `pool_before[k]`: layer `k` starts a new stage.
    pool_before: Vec<bool>,
    head: Conv,
}

/// Feature maps at the requested taps and how many conv layers ran.
pub struct Features {
    pub maps: Vec<Var>,
    pub executed_layers: usize,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn build(config: &ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut pool_before = Vec::new();
        let mut in_ch = 3;
        for (s, (&n, &width)) in config.stage_layers.iter().zip(&config.stage_widths).enumerate() {
            for j in 0..n {
                let k = layers.len();
                let spec = ConvSpec::same(in_ch, width, 3, 1);
                layers.push(Conv::new(&mut params, &format!("features.{k}"), spec, Init::HeNormal, &mut rng)?);
                pool_before.push(s > 0 && j == 0);
                in_ch = width;
            }
        }
        let head = Conv::new(&mut params, "head", ConvSpec::same(in_ch, 1, 1, 1), Init::HeNormal, &mut rng)?;
        Ok(FeatureExtractor {
            config: config.clone(),
            params,
            layers,
            pool_before,
            head,
        })
    }

    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// Runs layers up to the largest tap only.
    pub fn features(&self, tape: &mut Tape<T>, x: Var, taps: &[usize]) -> Result<Features> {
        let last = taps.iter().copied().max().unwrap_or(0);
        if taps.contains(&0) || last > self.layers.len() {
            return Err(Error::Config(format!(
                "tap indices {taps:?} outside 1..={}",
                self.layers.len()
            )));
        }
        let mut maps = vec![x; taps.len()];
        let mut h = x;
        for k in 0..last {
            if self.pool_before[k] {
                h = tape.maxpool2d(h, 2, 2)?;
            }
            h = self.layers[k].forward(tape, &self.params, h)?;
            h = tape.relu(h);
            for (slot, &t) in maps.iter_mut().zip(taps) {
                if t == k + 1 {
                    *slot = h;
                }
            }
        }
        Ok(Features {
            maps,
            executed_layers: last,
        })
    }

    /// Hazy-vs-clean logits, shape `[B]`; positive means hazy.
    pub fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let all = self.layers.len();
        let f = self.features(tape, x, &[all])?;
        let pooled = tape.global_avg_pool(f.maps[0])?;
        let z = self.head.forward(tape, &self.params, pooled)?;
        let b = tape.shape(z)[0];
        tape.reshape(z, &[b])
    }

    pub fn predict_hazy_prob(&self, img: &Tensor<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let z = self.logits(&mut tape, x)?;
        Ok(tape.value(z).data().iter().map(|v| 1.0 / (1.0 + (-v.as_f64()).exp())).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let layout = |v: &[usize]| Tensor::new(&[v.len()], v.iter().map(|&x| x as f32).collect()).unwrap();
        Checkpoint {
            params: self.params.iter().map(|(n, t)| (n.to_owned(), t.cast())).collect(),
            extras: vec![
                (format!("{EXTRA_PREFIX}extractor.layers"), layout(&self.config.stage_layers)),
                (format!("{EXTRA_PREFIX}extractor.widths"), layout(&self.config.stage_widths)),
            ],
        }
    }

    /// Rebuilds the layout stored in the checkpoint and loads its weights, frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let layout = |key: &str| -> Result<Vec<usize>> {
            let t = ck
                .extra(&format!("{EXTRA_PREFIX}extractor.{key}"))
                .ok_or_else(|| Error::Config(format!("not an extractor checkpoint (no {key})")))?;
            Ok(t.data().iter().map(|&v| v as usize).collect())
        };
        let config = ExtractorConfig {
            stage_layers: layout("layers")?,
            stage_widths: layout("widths")?,
        };
        let mut ex = Self::build(&config, 0)?;
        ex.params.load_from(&ck.params)?;
        ex.freeze();
        Ok(ex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrVariant {
    None,
    #[serde(rename = "original")]
    OriginalCr,
    Dfcr,
    Sifcr,
}

impl CrVariant {
    pub const ALL: [CrVariant; 4] = [CrVariant::None, CrVariant::OriginalCr, CrVariant::Dfcr, CrVariant::Sifcr];

    pub fn label(self) -> &'static str {
        match self {
            CrVariant::None => "none",
            CrVariant::OriginalCr => "original",
            CrVariant::Dfcr => "dfcr",
            CrVariant::Sifcr => "sifcr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown loss variant {s:?} (none|original|dfcr|sifcr)")))
    }

    /// Default taps and weights.
    pub fn taps(self) -> (Vec<usize>, Vec<f64>) {
        match self {
            CrVariant::None => (vec![], vec![]),
            CrVariant::OriginalCr => (vec![1, 3, 5, 9, 13], vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0]),
            CrVariant::Dfcr => (vec![1, 3, 5], vec![1.0; 3]),
            CrVariant::Sifcr => (vec![9, 13], vec![1.0; 2]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrConfig {
    pub variant: CrVariant,
    /// Overrides the variant's taps; must come with matching `weights`.
    pub taps: Option<Vec<usize>>,
    pub weights: Option<Vec<f64>>,
    pub epsilon: f64,
    /// Weight of the regularizer next to the L1 term.
    pub beta: f64,
}

impl Default for CrConfig {
    fn default() -> Self {
        CrConfig {
            variant: CrVariant::Dfcr,
            taps: None,
            weights: None,
            epsilon: 1e-7,
            beta: 0.1,
        }
    }
}

impl CrConfig {
    pub fn new(variant: CrVariant) -> Self {
        CrConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn resolved_taps(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        let (dt, dw) = self.variant.taps();
        let taps = self.taps.clone().unwrap_or(dt);
        let weights = self.weights.clone().unwrap_or(dw);
        if taps.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} taps but {} weights",
                taps.len(),
                weights.len()
            )));
        }
        Ok((taps, weights))
    }

    /// Whether the regularizer contributes at all.
    pub fn active(&self) -> bool {
        self.variant != CrVariant::None && self.beta != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let (taps, weights) = self.resolved_taps()?;
        if taps.contains(&0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config(format!("bad taps {taps:?} / weights {weights:?}")));
        }
        if !(self.epsilon > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("epsilon must be positive and beta non-negative".into()));
        }
        Ok(())
    }
}

/// The regularizer value and how deep the extractor ran.
pub struct CrOutput {
    pub loss: Var,
    pub executed_layers: usize,
}

/// Contrastive regularization of `o` against positive `j` and negative `i`.
/// `j` and `i` are detached and the extractor must be frozen, so gradient
/// reaches `o` only.
pub fn cr_loss<T: Real>(
    tape: &mut Tape<T>,
    o: Var,
    j: Var,
    i: Var,
    extractor: &FeatureExtractor<T>,
    cfg: &CrConfig,
) -> Result<CrOutput> {
    if !extractor.is_frozen() {
        return Err(Error::pre("cr_loss", "extractor must be frozen"));
    }
    for v in [j, i] {
        if tape.shape(v) != tape.shape(o) {
            return Err(Error::shape("cr_loss", tape.shape(o), tape.shape(v)));
        }
    }
    let (taps, weights) = cfg.resolved_taps()?;
    let (j, i) = (tape.detach(j), tape.detach(i));
    let fo = extractor.features(tape, o, &taps)?;
    let fj = extractor.features(tape, j, &taps)?;
    let fi = extractor.features(tape, i, &taps)?;
    let mut total: Option<Var> = None;
    for (k, &w) in weights.iter().enumerate() {
        let pos = tape.l1_mean(fj.maps[k], fo.maps[k])?;
        let neg = tape.l1_mean(fi.maps[k], fo.maps[k])?;
        let neg = tape.add_scalar(neg, T::lit(cfg.epsilon));
        let ratio = tape.div(pos, neg)?;
        let term = tape.scale(ratio, T::lit(w));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    Ok(CrOutput {
        loss,
        executed_layers: fo.executed_layers,
    })
}

/// Loss value with its terms broken out for logging.
pub struct LossTerms {
    pub total: Var,
    pub l1: f64,
    pub cr: Option<f64>,
}

/// `l1_mean(o, j) + beta · cr_loss(...)`; exactly the L1 term when the
/// regularizer is inactive.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    o: Var,
    j: Var,
    i: Var,
    extractor: Option<&FeatureExtractor<T>>,
    cfg: &CrConfig,
) -> Result<LossTerms> {
    let l1 = tape.l1_mean(o, j)?;
    let l1_value = tape.value(l1).data()[0].as_f64();
    if !cfg.active() {
        return Ok(LossTerms {
            total: l1,
            l1: l1_value,
            cr: None,
        });
    }
    let ex = extractor.ok_or_else(|| Error::pre("total_loss", "regularizer enabled but no extractor given"))?;
    let cr = cr_loss(tape, o, j, i, ex, cfg)?;
    let cr_value = tape.value(cr.loss).data()[0].as_f64();
    let scaled = tape.scale(cr.loss, T::lit(cfg.beta));
    Ok(LossTerms {
        total: tape.add(l1, scaled)?,
        l1: l1_value,
        cr: Some(cr_value),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    pub extractor: ExtractorConfig,
}

impl Default for ProxyTrainOptions {
    fn default() -> Self {
        ProxyTrainOptions {
            steps: 300,
            batch_size: 8,
            crop: 32,
            lr: 1e-3,
            seed: 0,
            extractor: ExtractorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProxyReport {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Accuracy over both images of every pair (clean = 0, hazy = 1), using a
/// centered crop sized to a multiple of the pooling factor.
pub fn classification_accuracy(ex: &FeatureExtractor<f32>, pairs: &[ImagePair], crop: usize) -> Result<f64> {
    let pool = 1usize << (ex.config.stage_layers.len() - 1);
    let mut correct = 0usize;
    for p in pairs {
        for (img, hazy) in [(&p.clean, false), (&p.hazy, true)] {
            let c = data::center_crop_multiple(img, pool, crop.max(pool))?;
            let prob = ex.predict_hazy_prob(&c)?[0];
            correct += usize::from((prob > 0.5) == hazy);
        }
    }
    Ok(correct as f64 / (2 * pairs.len()).max(1) as f64)
}

/// Trains the extractor as a hazy-vs-clean classifier on random augmented
/// crops and returns it frozen. Pairs are split 50/50 into train and held-out
/// halves by a seeded shuffle.
pub fn train_proxy_classifier(
    pairs: &[ImagePair],
    opts: &ProxyTrainOptions,
) -> Result<(FeatureExtractor<f32>, ProxyReport)> {
    if pairs.len() < 2 {
        return Err(Error::pre(
            "train_proxy_classifier",
            "need at least two pairs (one to train, one held out)",
        ));
    }
    let pool = 1usize << (opts.extractor.stage_layers.len().max(1) - 1);
    if opts.crop == 0 || opts.crop % pool != 0 || opts.batch_size == 0 {
        return Err(Error::Config(format!(
            "proxy crop {} must be a positive multiple of {pool}, batch positive",
            opts.crop
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for k in (1..order.len()).rev() {
        order.swap(k, rng.gen_range(0..=k));
    }
    let half = pairs.len() / 2;
    let heldout: Vec<ImagePair> = order[..half].iter().map(|&k| pairs[k].clone()).collect();
    let train: Vec<ImagePair> = order[half..].iter().map(|&k| pairs[k].clone()).collect();

    let mut ex = FeatureExtractor::<f32>::build(&opts.extractor, opts.seed)?;
    let mut adam = Adam::new(&ex.params, AdamConfig::default());
    let mut last = f64::NAN;
    for step in 0..opts.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(step as u64 + 1);
        let mut imgs = Vec::with_capacity(opts.batch_size);
        let mut labels = Vec::with_capacity(opts.batch_size);
        for b in 0..opts.batch_size {
            let pair = &train[rng.gen_range(0..train.len())];
            let hazy = b % 2 == 1;
            let src = if hazy { &pair.hazy } else { &pair.clean };
            let (_, _, h, w) = src.dims4()?;
            let (top, left) = data::random_window(h, w, opts.crop, &mut rng)?;
            let c = data::crop(src, top, left, opts.crop, opts.crop)?;
            imgs.push(Augment::sample(&mut rng).apply(&c)?);
            labels.push(if hazy { 1.0f32 } else { 0.0 });
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::stack_batch(&imgs)?);
        let z = ex.logits(&mut tape, x)?;
        let loss = tape.bce_with_logits(z, &labels)?;
        last = tape.value(loss).data()[0] as f64;
        if !last.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as u64,
                term: "proxy bce".into(),
            });
        }
        tape.backward(loss)?;
        let grads = tape.param_grads(&ex.params);
        adam.update(&mut ex.params, &grads, opts.lr)?;
    }
    ex.freeze();
    let report = ProxyReport {
        train_pairs: train.len(),
        heldout_pairs: heldout.len(),
        final_loss: last,
        train_accuracy: classification_accuracy(&ex, &train, 64)?,
        heldout_accuracy: classification_accuracy(&ex, &heldout, 64)?,
    };
    Ok((ex, report))
}
