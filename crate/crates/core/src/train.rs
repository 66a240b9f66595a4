//! Dehazer training: seeded batches of augmented crops, Adam with a cosine
//! schedule, resumable checkpoints and evaluation.
//!
//! Every random choice of step `t` comes from a generator seeded with the run
//! seed on stream `t`, so resuming from a checkpoint at step `k` replays the
//! same batches an uninterrupted run would have seen.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, EXTRA_PREFIX};
use crate::data::{self, Augment};
use crate::error::{Error, Result};
use crate::haze::ImagePair;
use crate::losses::{total_loss, CrConfig, FeatureExtractor};
use crate::metrics::{psnr, ssim, SSIM_WINDOW};
use crate::net::{Model, NetworkConfig};
use crate::optim::{Adam, AdamConfig, CosineSchedule};
use crate::tensor::Tensor;
use crate::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub crop_size: usize,
    /// Random right-angle rotation and horizontal/vertical flips.
    pub augment: bool,
    pub seed: u64,
    pub adam: AdamConfig,
    pub log_every: u64,
    /// Write a resumable checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 2e-4,
            lr_final: 1e-6,
            batch_size: 4,
            iterations: 2000,
            crop_size: 64,
            augment: true,
            seed: 0,
            adam: AdamConfig::default(),
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final <= self.lr_init && self.lr_final >= 0.0) {
            return Err(Error::Config(format!(
                "lr_final {} must lie in [0, lr_init {}]",
                self.lr_final, self.lr_init
            )));
        }
        if self.crop_size == 0 || self.crop_size % 16 != 0 {
            return Err(Error::Config(format!("crop_size {} must be a positive multiple of 16", self.crop_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            total: self.iterations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub cr: Option<f64>,
}

pub struct Trainer<'a> {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    pub loss: CrConfig,
    pub step: u64,
    pairs: &'a [ImagePair],
    extractor: Option<&'a FeatureExtractor<f32>>,
}

const STEP_KEY: &str = "train.step";

impl<'a> Trainer<'a> {
    pub fn new(
        network: &NetworkConfig,
        config: TrainConfig,
        loss: CrConfig,
        pairs: &'a [ImagePair],
        extractor: Option<&'a FeatureExtractor<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        if pairs.is_empty() {
            return Err(Error::pre("train", "no training pairs"));
        }
        if loss.active() && extractor.is_none() {
            return Err(Error::Config(format!(
                "loss variant {} needs a proxy extractor checkpoint",
                loss.variant.label()
            )));
        }
        let model = Model::build(network, config.seed)?;
        let adam = Adam::new(&model.params, config.adam);
        Ok(Trainer {
            model,
            adam,
            config,
            loss,
            step: 0,
            pairs,
            extractor,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        network: &NetworkConfig,
        config: TrainConfig,
        loss: CrConfig,
        pairs: &'a [ImagePair],
        extractor: Option<&'a FeatureExtractor<f32>>,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(network, config, loss, pairs, extractor)?;
        t.model = Model::from_checkpoint(network, ck)?;
        t.adam = Adam::from_extras(&t.model.params, t.config.adam, &ck.extras)?;
        t.step = ck
            .extra(&format!("{EXTRA_PREFIX}{STEP_KEY}"))
            .map(|s| s.data()[0] as u64)
            .ok_or_else(|| Error::Config("checkpoint has no training step".into()))?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.extras
            .push((format!("{EXTRA_PREFIX}{STEP_KEY}"), Tensor::scalar(self.step as f32)));
        ck.extras.extend(self.adam.to_extras(&self.model.params));
        ck
    }

    fn batch(&self, step: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        let n = self.pairs.len();
        let picks: Vec<usize> = if self.config.batch_size <= n {
            sample(&mut rng, n, self.config.batch_size).into_vec()
        } else {
            (0..self.config.batch_size).map(|k| k % n).collect()
        };
        let size = self.config.crop_size;
        let (mut hazy, mut clean) = (Vec::new(), Vec::new());
        for k in picks {
            let p = &self.pairs[k];
            let (_, _, h, w) = p.clean.dims4()?;
            let (top, left) = data::random_window(h, w, size, &mut rng)?;
            let aug = if self.config.augment {
                Augment::sample(&mut rng)
            } else {
                Augment::default()
            };
            hazy.push(aug.apply(&data::crop(&p.hazy, top, left, size, size)?)?);
            clean.push(aug.apply(&data::crop(&p.clean, top, left, size, size)?)?);
        }
        Ok((Tensor::stack_batch(&hazy)?, Tensor::stack_batch(&clean)?))
    }

    /// One optimizer step; aborts on a non-finite loss term.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let step = self.step;
        let (hazy, clean) = self.batch(step)?;
        let mut tape = Tape::new();
        let i = tape.constant(hazy);
        let j = tape.constant(clean);
        let o = self.model.forward(&mut tape, i)?;
        let terms = total_loss(&mut tape, o, j, i, self.extractor, &self.loss)?;
        let loss = tape.value(terms.total).data()[0] as f64;
        for (name, v) in [("l1", Some(terms.l1)), ("cr", terms.cr), ("total", Some(loss))] {
            if v.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { step, term: name.into() });
            }
        }
        tape.backward(terms.total)?;
        let grads = tape.param_grads(&self.model.params);
        let lr = self.config.schedule().lr(step);
        self.adam.update(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepStats {
            step,
            lr,
            loss,
            l1: terms.l1,
            cr: terms.cr,
        })
    }

    /// Trains until `end` (exclusive step index), calling `on_step` after each step.
    pub fn run_until(&mut self, end: u64, mut on_step: impl FnMut(&Self, &StepStats) -> Result<()>) -> Result<()> {
        while self.step < end {
            let s = self.train_step()?;
            on_step(self, &s)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr: f64,
    /// `None` when the image is smaller than the SSIM window.
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub images: Vec<ImageScore>,
    #[serde(serialize_with = "finite_or_inf")]
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
}

/// JSON has no infinity, so the sentinel is written as the string `"inf"`.
pub fn finite_or_inf<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Scores `restore(hazy)` against `clean` for every pair.
pub fn evaluate_with(
    pairs: &[ImagePair],
    mut restore: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<EvalSummary> {
    let mut images = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = restore(&p.hazy)?;
        let (_, _, h, w) = out.dims4()?;
        let s = (h >= SSIM_WINDOW && w >= SSIM_WINDOW)
            .then(|| ssim(&out, &p.clean))
            .transpose()?;
        images.push(ImageScore {
            id: p.id.clone(),
            psnr: psnr(&out, &p.clean, 1.0)?,
            ssim: s,
        });
    }
    let n = images.len().max(1) as f64;
    let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mean_ssim = images
        .iter()
        .map(|s| s.ssim)
        .sum::<Option<f64>>()
        .map(|v| v / n);
    Ok(EvalSummary {
        images,
        mean_psnr,
        mean_ssim,
    })
}

/// Evaluation of a model on full images, outputs clamped to `[0, 1]`.
pub fn evaluate(model: &Model<f32>, pairs: &[ImagePair]) -> Result<EvalSummary> {
    evaluate_with(pairs, |hazy| model.predict(hazy, true))
}
