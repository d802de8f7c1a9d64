use serde::{Deserialize, Serialize};

use super::{check_bound, ConvLayer, Forward, Network, NormLayer, ParamStore};
use crate::autodiff::{BatchNormConfig, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Output stage of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailConfig {
    /// One 3x3 conv from `width` straight to the image channels.
    Direct,
    /// A 3x3 conv to `channels` maps with ReLU, then a 3x3 conv to the image
    /// channels.
    Penultimate { channels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Image channels; input and output agree because of the global bypass.
    pub channels: usize,
    pub width: usize,
    pub modules: usize,
    pub tail: TailConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { channels: 1, width: 128, modules: 6, tail: TailConfig::Direct }
    }
}

impl GeneratorConfig {
    /// Channels entering the fusion conv: every module input plus the last
    /// module output.
    pub fn concat_channels(&self) -> usize {
        (self.modules + 1) * self.width
    }

    /// Trainable scalars, from the layer list alone.
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let norm = |c: usize| 2 * c;
        let (w, c) = (self.width, self.channels);
        let mut n = conv(c, w) + norm(w);
        n += self.modules * 3 * (conv(w, w) + norm(w));
        n += conv(self.concat_channels(), w) + norm(w);
        n += match self.tail {
            TailConfig::Direct => conv(w, c),
            TailConfig::Penultimate { channels } => conv(w, channels) + conv(channels, c),
        };
        n
    }
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: ConvLayer,
    norm: NormLayer,
}

/// Residual denoiser: conv head, stacked three-layer residual modules, a
/// concatenation of every module input with the last output, a fusion conv,
/// a tail conv, and an end-to-end bypass adding the input back.
#[derive(Clone, Debug)]
pub struct Generator<T: Real = f32> {
    config: GeneratorConfig,
    store: ParamStore<T>,
    head: ConvNorm,
    modules: Vec<[ConvNorm; 3]>,
    fuse: ConvNorm,
    tail: Vec<ConvLayer>,
    norm_cfg: BatchNormConfig,
}

impl<T: Real> Generator<T> {
    /// Builds the layer graph with identity-initialized parameters; call
    /// [`Network::init_params`] before training.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        if config.channels == 0 || config.width == 0 || config.modules == 0 {
            return Err(Error::contract("generator channels, width and modules must be positive"));
        }
        if let TailConfig::Penultimate { channels: 0 } = config.tail {
            return Err(Error::contract("penultimate tail needs at least one channel"));
        }
        let mut store = ParamStore::default();
        let w = config.width;
        let conv_norm = |store: &mut ParamStore<T>, name: &str, cin: usize| ConvNorm {
            conv: store.conv(&format!("{name}.conv"), cin, w, 3, 1, 1),
            norm: store.norm(&format!("{name}.bn"), w),
        };
        let head = conv_norm(&mut store, "head", config.channels);
        let modules = (0..config.modules)
            .map(|m| [0, 1, 2].map(|l| conv_norm(&mut store, &format!("module{m}.layer{l}"), w)))
            .collect();
        let fuse = conv_norm(&mut store, "fuse", config.concat_channels());
        let tail = match config.tail {
            TailConfig::Direct => vec![store.conv("tail.conv", w, config.channels, 3, 1, 1)],
            TailConfig::Penultimate { channels } => vec![
                store.conv("tail.conv0", w, channels, 3, 1, 1),
                store.conv("tail.conv1", channels, config.channels, 3, 1, 1),
            ],
        };
        Ok(Generator { config, store, head, modules, fuse, tail, norm_cfg: BatchNormConfig::default() })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config,
            store: self.store.cast(),
            head: self.head.clone(),
            modules: self.modules.clone(),
            fuse: self.fuse.clone(),
            tail: self.tail.clone(),
            norm_cfg: self.norm_cfg,
        }
    }

    /// `x + residual(x)` for an `N,C,H,W` batch with `H,W >= 3`.
    pub fn forward(&mut self, tape: &mut Tape<T>, bound: &[Var], x: Var, mode: NormMode) -> Result<Var> {
        check_bound(bound, self.store.params().len(), "generator")?;
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != self.config.channels {
            return Err(Error::dim(format!(
                "generator channel axis: input has {c}, network built for {}",
                self.config.channels
            )));
        }
        if h < 3 || w < 3 {
            return Err(Error::dim(format!("generator spatial axes must be >= 3, got {h}x{w}")));
        }
        let mut f = Forward { tape, vars: bound, stats: self.store.norm_stats_mut(), mode, norm_cfg: self.norm_cfg };
        let mut cur = f.conv_norm_relu(&self.head.conv, &self.head.norm, x)?;
        let mut branches = Vec::with_capacity(self.modules.len() + 1);
        for module in &self.modules {
            branches.push(cur);
            let mut y = cur;
            for layer in module {
                y = f.conv_norm_relu(&layer.conv, &layer.norm, y)?;
            }
            let sum = f.tape.add(cur, y)?;
            cur = f.tape.relu(sum);
        }
        branches.push(cur);
        let cat = f.tape.concat(&branches, 1)?;
        let mut y = f.conv_norm_relu(&self.fuse.conv, &self.fuse.norm, cat)?;
        let last = self.tail.len() - 1;
        for (i, conv) in self.tail.iter().enumerate() {
            y = f.conv(conv, y)?;
            if i < last {
                y = f.tape.relu(y);
            }
        }
        f.tape.add(x, y)
    }
}

impl<T: Real> Network<T> for Generator<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}
