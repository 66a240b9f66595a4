//! Parameters and the convolution layer used by every block.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of learnable tensors.
///
/// A frozen store binds its tensors as constants, so no gradient is ever
/// recorded for them.
#[derive(Debug)]
pub struct ParamStore<T: Real> {
    uid: u64,
    frozen: bool,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            frozen: self.frozen,
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            frozen: false,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut()
    }

    /// Replaces every tensor with the same-named tensor from `other`,
    /// reporting any name or shape disagreement.
    pub fn load_from<U: Real>(&mut self, other: &[(String, Tensor<U>)]) -> Result<()> {
        let missing: Vec<String> = self
            .names
            .iter()
            .filter(|n| !other.iter().any(|(o, _)| o == *n))
            .cloned()
            .collect();
        let unexpected: Vec<String> = other
            .iter()
            .filter(|(o, _)| !self.names.contains(o))
            .map(|(o, _)| o.clone())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::ParameterMismatch {
                missing,
                unexpected,
            });
        }
        for (name, t) in other {
            let i = self.names.iter().position(|n| n == name).expect("checked");
            if self.values[i].shape() != t.shape() {
                return Err(Error::shape("load parameters", self.values[i].shape(), t.shape()));
            }
            self.values[i] = t.cast();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            frozen: self.frozen,
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Declarative convolution description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution with zero "same" padding `dilation·(kernel−1)/2`.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            has_bias: true,
        }
    }

    pub fn strided(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride,
            dilation: 1,
            padding,
            has_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 4].contains(&self.kernel) || ![1, 2].contains(&self.dilation) || ![1, 2].contains(&self.stride) {
            return Err(Error::Config(format!("unsupported conv spec {self:?}")));
        }
        if self.in_ch == 0 || self.out_ch == 0 {
            return Err(Error::Config(format!("zero channels in {self:?}")));
        }
        Ok(())
    }

    pub fn weight_count(&self) -> usize {
        self.kernel * self.kernel * self.in_ch * self.out_ch
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.out_ch } else { 0 }
    }
}

/// Weight initialisation for convolution layers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-style normal with std `sqrt(2 / fan_in)`.
    HeNormal,
    /// Uniform on `±1/sqrt(fan_in)`, variance `1/(3·fan_in)`. Keeps long
    /// residual stacks near unit gain where He init compounds.
    FanInUniform,
    Zeros,
}

/// A convolution (or transposed convolution) with its parameters.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub transposed: bool,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(store, name, spec, false, init, rng)
    }

    pub fn new_transposed<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(store, name, spec, true, init, rng)
    }

    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        transposed: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let shape = if transposed {
            [spec.in_ch, spec.out_ch, k, k]
        } else {
            [spec.out_ch, spec.in_ch, k, k]
        };
        let w = match init {
            Init::HeNormal => {
                let fan_in = spec.in_ch * k * k;
                Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), rng)
            }
            Init::FanInUniform => {
                // the fan of the weight's second axis, as for a transposed conv's output
                let fan_in = shape[1] * k * k;
                let b = 1.0 / (fan_in as f64).sqrt();
                Tensor::rand_uniform(&shape, -b, b, rng)
            }
            Init::Zeros => Tensor::zeros(&shape),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = spec
            .has_bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_ch])));
        Ok(Conv {
            spec,
            transposed,
            weight,
            bias,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        if self.transposed {
            tape.conv_transpose2d(x, w, b, &self.spec)
        } else {
            tape.conv2d(x, w, b, &self.spec)
        }
    }
}
