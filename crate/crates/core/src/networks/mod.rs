//! The learnable parts of the pipeline: the latent-to-primitive generator,
//! the shared 2D refiner and the conditional discriminator.

mod adain;
mod checkpoint;
mod discriminator;
mod g2d;
mod g3d;

pub use adain::{adain, instance_norm, ADAIN_EPS};
pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_MAGIC};
pub use discriminator::{spectral_normalize, Discriminator, SpectralWeights};
pub use g2d::{G2d, RefinedTriplet, D_NEAR};
pub use g3d::G3d;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::{Error, Real, Result};

/// Leaky-ReLU slope used throughout.
pub const LEAKY_SLOPE: Real = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub g3d_width: usize,
    pub g3d_layers: usize,
    /// Channels after the first and second stride-2 encoder block.
    pub g2d_channels: [usize; 2],
    pub g2d_res_blocks: usize,
    pub disc_channels: [usize; 4],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            g3d_width: 256,
            g3d_layers: 2,
            g2d_channels: [16, 32],
            g2d_res_blocks: 2,
            disc_channels: [16, 32, 64, 64],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.latent_dim, self.g3d_width, self.g2d_channels[0], self.g2d_channels[1]];
        if widths.contains(&0) || self.disc_channels.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named weight tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Record every tensor on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Replace all values, checking names and shapes against the current ones.
    pub fn load(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t.clone();
        }
        Ok(())
    }
}

/// A [`ParamSet`] recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps variables laid out like the set they stand in for.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// `U(-b, b)` with `b = gain·sqrt(3 / fan_in)`, which gives variance `gain²/fan_in`.
fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: Real) -> Tensor {
    let bound = gain * (3.0 / fan_in as Real).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

/// Gain that preserves activation variance through a leaky ReLU.
fn leaky_gain() -> Real {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    fn new(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize, gain: Real, rng: &mut impl Rng) -> Self {
        Self {
            weight: params.push(format!("{name}.weight"), fan_in_uniform(rng, &[outputs, inputs], inputs, gain)),
            bias: params.push(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            inputs,
            outputs,
        }
    }

    /// `W x + b` for a vector `x` of any shape with `inputs` entries.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.apply(p.var(self.weight), Some(p.var(self.bias)), x)
    }

    /// Same map with an explicit weight, e.g. a normalized one.
    fn apply<'t>(&self, weight: Var<'t>, bias: Option<Var<'t>>, x: Var<'t>) -> Result<Var<'t>> {
        if x.numel() != self.inputs {
            return Err(Error::Shape(format!("linear layer expects {} inputs, got {:?}", self.inputs, x.shape())));
        }
        let y = weight.matmul(x.reshape(&[self.inputs, 1])?)?.reshape(&[self.outputs])?;
        match bias {
            Some(b) => y.try_add(b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub kernel: usize,
}

impl Conv {
    fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, gain: Real, rng: &mut impl Rng) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: params.push(format!("{name}.weight"), fan_in_uniform(rng, &[cout, cin, kernel, kernel], fan_in, gain)),
            bias: params.push(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            kernel,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.stride, self.kernel / 2)
    }
}
