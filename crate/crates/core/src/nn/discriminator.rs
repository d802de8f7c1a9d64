use serde::{Deserialize, Serialize};

use super::{check_bound, ConvLayer, Forward, Network, NormLayer, ParamStore};
use crate::autodiff::{conv_out_extent, BatchNormConfig, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Side of the square tiles an arbitrary image is scored on.
pub const PATCH: usize = 56;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    /// Filters in the first stage; later stages double it up to 8x.
    pub base_width: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { channels: 1, base_width: 64, leaky_slope: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub norm: bool,
    pub activation: bool,
}

impl DiscriminatorConfig {
    /// C64-C128-C256-C512 with 4x4 kernels, then a 4x4 conv to one score map.
    pub fn stages(&self) -> [StageSpec; 5] {
        let b = self.base_width;
        let s = |out_channels, stride, norm, activation| StageSpec {
            out_channels,
            kernel: 4,
            stride,
            padding: 1,
            norm,
            activation,
        };
        [
            s(b, 2, false, true),
            s(2 * b, 2, true, true),
            s(4 * b, 2, true, true),
            s(8 * b, 1, true, true),
            s(1, 1, false, false),
        ]
    }

    /// Spatial extent after each stage, or an error naming the stage whose
    /// input is smaller than its kernel.
    pub fn stage_extents(&self, input: usize) -> Result<Vec<usize>> {
        let mut cur = input;
        let mut out = Vec::with_capacity(5);
        for (i, st) in self.stages().iter().enumerate() {
            cur = conv_out_extent(cur, st.kernel, st.stride, st.padding).ok_or_else(|| {
                Error::dim(format!("discriminator stage {} cannot take extent {cur} (input extent {input})", i + 1))
            })?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Smallest square input that survives all stages.
    pub fn min_input_extent(&self) -> usize {
        (1..).find(|&n| self.stage_extents(n).is_ok()).expect("some extent fits")
    }
}

/// Receptive field of one output unit of a chain of `(kernel, stride)`
/// layers: `rf += (k - 1) * jump; jump *= s`.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for &(k, s) in layers {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}

#[derive(Clone, Debug)]
struct Stage {
    spec: StageSpec,
    conv: ConvLayer,
    norm: Option<NormLayer>,
}

/// PatchGAN discriminator emitting an unsquashed score per image region.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Real = f32> {
    config: DiscriminatorConfig,
    store: ParamStore<T>,
    stages: Vec<Stage>,
    norm_cfg: BatchNormConfig,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        if config.channels == 0 || config.base_width == 0 {
            return Err(Error::contract("discriminator channels and base width must be positive"));
        }
        let mut store = ParamStore::default();
        let mut cin = config.channels;
        let stages = config
            .stages()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let conv = store.conv(
                    &format!("stage{i}.conv"),
                    cin,
                    spec.out_channels,
                    spec.kernel,
                    spec.stride,
                    spec.padding,
                );
                let norm = spec.norm.then(|| store.norm(&format!("stage{i}.bn"), spec.out_channels));
                cin = spec.out_channels;
                Stage { spec: *spec, conv, norm }
            })
            .collect();
        Ok(Discriminator { config, store, stages, norm_cfg: BatchNormConfig::default() })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn receptive_field(&self) -> usize {
        let layers: Vec<_> = self.stages.iter().map(|s| (s.spec.kernel, s.spec.stride)).collect();
        receptive_field(&layers)
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config,
            store: self.store.cast(),
            stages: self.stages.clone(),
            norm_cfg: self.norm_cfg,
        }
    }

    /// Score map for an `N,C,H,W` batch.
    pub fn forward(&mut self, tape: &mut Tape<T>, bound: &[Var], x: Var, mode: NormMode) -> Result<Var> {
        check_bound(bound, self.store.params().len(), "discriminator")?;
        let [_, c, h, w] = tape.value(x).dims4()?;
        if c != self.config.channels {
            return Err(Error::dim(format!(
                "discriminator channel axis: input has {c}, network built for {}",
                self.config.channels
            )));
        }
        self.config.stage_extents(h)?;
        self.config.stage_extents(w)?;
        let slope = T::from_f64(self.config.leaky_slope);
        let mut f = Forward { tape, vars: bound, stats: self.store.norm_stats_mut(), mode, norm_cfg: self.norm_cfg };
        let mut y = x;
        for stage in &self.stages {
            y = f.conv(&stage.conv, y)?;
            if let Some(norm) = &stage.norm {
                y = f.norm(norm, y)?;
            }
            if stage.spec.activation {
                y = f.tape.leaky_relu(y, slope);
            }
        }
        Ok(y)
    }

    /// Scores an arbitrary image of at least `PATCH x PATCH` pixels: tiles it
    /// into non-overlapping patches after reflect-padding the bottom/right to
    /// a multiple of the patch size, takes `mean((score - target)^2)` per
    /// patch, and sums over patches (and over the batch).
    pub fn score_image(
        &mut self,
        tape: &mut Tape<T>,
        bound: &[Var],
        image: Var,
        target: T,
        mode: NormMode,
    ) -> Result<Var> {
        let [_, _, h, w] = tape.value(image).dims4()?;
        if h < PATCH || w < PATCH {
            return Err(Error::dim(format!("image {h}x{w} is smaller than the {PATCH}x{PATCH} patch")));
        }
        let (ph, pw) = (h.div_ceil(PATCH) * PATCH - h, w.div_ceil(PATCH) * PATCH - w);
        let padded = if ph > 0 || pw > 0 { tape.reflect_pad(image, ph, pw)? } else { image };
        let mut patches = Vec::new();
        for ty in 0..(h + ph) / PATCH {
            for tx in 0..(w + pw) / PATCH {
                patches.push(tape.crop(padded, ty * PATCH, tx * PATCH, PATCH, PATCH)?);
            }
        }
        let batch = tape.concat(&patches, 0)?;
        let scores = self.forward(tape, bound, batch, mode)?;
        let [_, _, sh, sw] = tape.value(scores).dims4()?;
        let d = tape.add_scalar(scores, -target);
        let sq = tape.square(d);
        let total = tape.sum_all(sq);
        Ok(tape.mul_scalar(total, T::one() / T::from_f64((sh * sw) as f64)))
    }
}

impl<T: Real> Network<T> for Discriminator<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}
