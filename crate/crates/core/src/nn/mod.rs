//! Parameter storage and the two network families: the residual denoising
//! generator and the PatchGAN discriminator.

mod discriminator;
mod generator;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use discriminator::{receptive_field, Discriminator, DiscriminatorConfig, StageSpec, PATCH};
pub use generator::{Generator, GeneratorConfig, TailConfig};

use crate::autodiff::{BatchNormConfig, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Which image population a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainLabel {
    /// Low-dose acquisitions (A).
    LowDose,
    /// Routine-dose acquisitions (B).
    RoutineDose,
}

/// The four networks of the cycle system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetworkKey {
    /// A → B, the denoiser.
    GenAB,
    /// B → A, the re-noiser.
    GenBA,
    /// Judges whether an image is a real low-dose sample.
    DiscA,
    /// Judges whether an image is a real routine-dose sample.
    DiscB,
}

impl NetworkKey {
    pub const ALL: [NetworkKey; 4] = [NetworkKey::GenAB, NetworkKey::GenBA, NetworkKey::DiscA, NetworkKey::DiscB];

    pub fn name(self) -> &'static str {
        match self {
            NetworkKey::GenAB => "G_AB",
            NetworkKey::GenBA => "G_BA",
            NetworkKey::DiscA => "D_A",
            NetworkKey::DiscB => "D_B",
        }
    }

    /// Domain of the images this network consumes (for generators) or judges
    /// (for discriminators).
    pub fn domain(self) -> DomainLabel {
        match self {
            NetworkKey::GenAB | NetworkKey::DiscA => DomainLabel::LowDose,
            NetworkKey::GenBA | NetworkKey::DiscB => DomainLabel::RoutineDose,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    NormGamma,
    NormBeta,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
    /// Accumulated gradient; cleared by the optimizer step.
    pub grad: Option<Vec<T>>,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
}

/// Ordered parameter and running-statistic storage shared by both networks.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    stats: Vec<NormStats<T>>,
}

impl<T: Real> ParamStore<T> {
    fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> usize {
        self.params.push(Param { name, kind, value: Arc::new(value), grad: None });
        self.params.len() - 1
    }

    pub(crate) fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> ConvLayer {
        let weight =
            self.push(format!("{name}.weight"), ParamKind::ConvWeight, Tensor::zeros([cout, cin, kernel, kernel]));
        let bias = Some(self.push(format!("{name}.bias"), ParamKind::ConvBias, Tensor::zeros([cout])));
        ConvLayer { weight, bias, stride, padding }
    }

    pub(crate) fn norm(&mut self, name: &str, channels: usize) -> NormLayer {
        let gamma = self.push(format!("{name}.gamma"), ParamKind::NormGamma, Tensor::full([channels], T::one()));
        let beta = self.push(format!("{name}.beta"), ParamKind::NormBeta, Tensor::zeros([channels]));
        self.stats.push(NormStats {
            name: name.to_string(),
            mean: Tensor::zeros([channels]),
            var: Tensor::full([channels], T::one()),
        });
        NormLayer { gamma, beta, stats: self.stats.len() - 1 }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn norm_stats(&self) -> &[NormStats<T>] {
        &self.stats
    }

    pub fn norm_stats_mut(&mut self) -> &mut [NormStats<T>] {
        &mut self.stats
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter on `tape` without copying storage.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf_shared(Arc::clone(&p.value), trainable)).collect()
    }

    /// Adds the gradients recorded on `tape` for `bound` into each parameter.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(g) = tape.grad(v) {
                match &mut p.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                    None => p.grad = Some(g.to_vec()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Gaussian initialization: conv weights ~ N(0, 0.02²), norm gains
    /// ~ N(1, 0.02²), biases and shifts zero. Running statistics reset.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        for p in &mut self.params {
            let shape = p.value.shape().to_vec();
            let value = match p.kind {
                ParamKind::ConvWeight => Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng))),
                ParamKind::NormGamma => Tensor::from_fn(shape, |_| T::from_f64(1.0 + normal.sample(&mut rng))),
                ParamKind::ConvBias | ParamKind::NormBeta => Tensor::zeros(shape),
            };
            p.value = Arc::new(value);
            p.grad = None;
        }
        for s in &mut self.stats {
            s.mean = Tensor::zeros(s.mean.shape().to_vec());
            s.var = Tensor::full(s.var.shape().to_vec(), T::one());
        }
    }

    /// Sets every convolution weight and bias to zero.
    pub fn zero_convolutions(&mut self) {
        for p in &mut self.params {
            if matches!(p.kind, ParamKind::ConvWeight | ParamKind::ConvBias) {
                p.value = Arc::new(Tensor::zeros(p.value.shape().to_vec()));
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Arc::new(p.value.cast()),
                    grad: p.grad.as_ref().map(|g| g.iter().map(|&x| U::from_f64(x.as_f64())).collect()),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| NormStats { name: s.name.clone(), mean: s.mean.cast(), var: s.var.cast() })
                .collect(),
        }
    }

    /// Replaces parameter values from `(name, tensor)` pairs, requiring every
    /// parameter to be present with a matching shape.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let t = lookup(&p.name).ok_or_else(|| Error::Load(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Load(format!(
                    "parameter {} has shape {:?}, network expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = Arc::new(t);
            p.grad = None;
        }
        Ok(())
    }
}

/// Common surface of the generator and discriminator.
pub trait Network<T: Real> {
    fn store(&self) -> &ParamStore<T>;

    fn store_mut(&mut self) -> &mut ParamStore<T>;

    fn params(&self) -> &[Param<T>] {
        self.store().params()
    }

    fn param_count(&self) -> usize {
        self.store().param_count()
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.store().bind(tape, trainable)
    }

    fn collect_grads(&mut self, tape: &Tape<T>, bound: &[Var]) {
        self.store_mut().collect_grads(tape, bound)
    }

    /// Seeded Gaussian initialization of every parameter.
    fn init_params(&mut self, seed: u64) {
        self.store_mut().init(seed)
    }
}

/// Forward-pass context: the tape, the bound parameter handles, and the
/// running statistics that train-mode normalization updates.
pub(crate) struct Forward<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub stats: &'a mut [NormStats<T>],
    pub mode: NormMode,
    pub norm_cfg: BatchNormConfig,
}

impl<T: Real> Forward<'_, T> {
    pub fn conv(&mut self, layer: &ConvLayer, x: Var) -> Result<Var> {
        let b = layer.bias.map(|b| self.vars[b]);
        self.tape.conv2d(x, self.vars[layer.weight], b, layer.stride, layer.padding)
    }

    pub fn norm(&mut self, layer: &NormLayer, x: Var) -> Result<Var> {
        let s = &mut self.stats[layer.stats];
        self.tape.batch_norm(
            x,
            self.vars[layer.gamma],
            self.vars[layer.beta],
            &mut s.mean,
            &mut s.var,
            self.mode,
            self.norm_cfg,
        )
    }

    pub fn conv_norm_relu(&mut self, conv: &ConvLayer, norm: &NormLayer, x: Var) -> Result<Var> {
        let y = self.conv(conv, x)?;
        let y = self.norm(norm, y)?;
        Ok(self.tape.relu(y))
    }
}

pub(crate) fn check_bound(bound: &[Var], expected: usize, net: &str) -> Result<()> {
    if bound.len() != expected {
        return Err(Error::contract(format!(
            "{net}: {} bound parameters supplied, network has {expected}",
            bound.len()
        )));
    }
    Ok(())
}
