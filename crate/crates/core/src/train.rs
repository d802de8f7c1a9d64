//! The cycle training loop: configuration, state, one optimization
//! iteration, and the epoch driver with CSV logging and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormMode, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{
    cyclic_loss, identity_loss, total_generator_objective, GeneratorTerms, LossReport, LossVariant, LossWeights,
    LOSS_CSV_HEADER,
};
use crate::nn::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Network, NetworkKey, TailConfig};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::phantom::{sample_patch_batch, DomainImage, UnpairedDataset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Adversarial, cyclic and identity terms.
    #[default]
    Full,
    /// Identity weight forced to zero.
    NoIdentity,
    /// Cyclic and identity weights forced to zero.
    GanOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoIdentity, Ablation::GanOnly];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoIdentity => "no_identity",
            Ablation::GanOnly => "gan_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown ablation {s:?}; expected full, no_identity or gan_only")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_cyc: f64,
    pub gamma_id: f64,
    pub ablation: Ablation,
    pub loss: LossVariant,
    pub epochs: u64,
    pub constant_epochs: u64,
    pub base_lr: f64,
    pub patch: usize,
    pub batch: usize,
    /// Defaults to `floor(#A images / batch)`.
    pub iterations_per_epoch: Option<u64>,
    pub seed: u64,
    /// Keep a numbered checkpoint every this many epochs; the epoch a run
    /// stops at is always kept. Zero keeps only that one. `last.ckpt` is
    /// rewritten after every epoch regardless.
    pub checkpoint_every: u64,
    /// Recompute generated images for the discriminator step with the
    /// updated generators instead of reusing the ones from the generator
    /// step.
    pub recompute_fakes: bool,
    pub adam: AdamConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let s = LrSchedule::default();
        TrainConfig {
            lambda_cyc: w.lambda_cyc,
            gamma_id: w.gamma_id,
            ablation: Ablation::Full,
            loss: LossVariant::Lsgan,
            epochs: s.total_epochs,
            constant_epochs: s.constant_epochs,
            base_lr: s.base_lr,
            patch: 56,
            batch: 10,
            iterations_per_epoch: None,
            seed: 0,
            checkpoint_every: 10,
            recompute_fakes: false,
            adam: AdamConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-size networks and schedule.
    pub fn full_scale() -> Self {
        Self::default()
    }

    /// Desk-scale profile: narrow networks and a 40-epoch schedule of 50
    /// iterations on small batches.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 40,
            constant_epochs: 25,
            base_lr: 1e-3,
            batch: 4,
            iterations_per_epoch: Some(50),
            checkpoint_every: 10,
            generator: GeneratorConfig { channels: 1, width: 8, modules: 2, tail: TailConfig::Direct },
            discriminator: DiscriminatorConfig { base_width: 8, ..Default::default() },
            ..Self::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "full_scale" => Ok(Self::full_scale()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::contract(format!("unknown profile {other:?}; expected full_scale or toy"))),
        }
    }

    /// Weights after applying the ablation.
    pub fn weights(&self) -> LossWeights {
        let (l, g) = match self.ablation {
            Ablation::Full => (self.lambda_cyc, self.gamma_id),
            Ablation::NoIdentity => (self.lambda_cyc, 0.0),
            Ablation::GanOnly => (0.0, 0.0),
        };
        LossWeights { lambda_cyc: l, gamma_id: g }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base_lr: self.base_lr, constant_epochs: self.constant_epochs, total_epochs: self.epochs }
    }

    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.lambda_cyc, self.gamma_id)?;
        self.schedule().validate()?;
        if self.batch == 0 || self.patch == 0 || self.iterations_per_epoch == Some(0) {
            return Err(Error::contract("batch, patch and iterations_per_epoch must be positive"));
        }
        self.discriminator.stage_extents(self.patch)?;
        Ok(())
    }

    pub fn iterations_per_epoch(&self, data: &UnpairedDataset) -> u64 {
        self.iterations_per_epoch.unwrap_or_else(|| (data.a.len() / self.batch).max(1) as u64)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn parse_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::format(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub g_ab: Generator,
    pub g_ba: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
    /// Indexed like [`NetworkKey::ALL`].
    pub adam: [AdamState; 4],
    /// Completed epochs.
    pub epoch: u64,
    /// Completed iterations.
    pub iteration: u64,
    /// Patch-sampling stream.
    pub rng: ChaCha8Rng,
    pub history: Vec<(u64, u64, LossReport)>,
}

impl TrainState {
    /// Fresh networks initialized from seeds derived from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut g_ab = Generator::new(config.generator)?;
        let mut g_ba = Generator::new(config.generator)?;
        let mut d_a = Discriminator::new(config.discriminator)?;
        let mut d_b = Discriminator::new(config.discriminator)?;
        let s = config.seed.wrapping_mul(4);
        g_ab.init_params(s);
        g_ba.init_params(s.wrapping_add(1));
        d_a.init_params(s.wrapping_add(2));
        d_b.init_params(s.wrapping_add(3));
        let adam = [
            AdamState::new(g_ab.store(), config.adam),
            AdamState::new(g_ba.store(), config.adam),
            AdamState::new(d_a.store(), config.adam),
            AdamState::new(d_b.store(), config.adam),
        ];
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
        Ok(TrainState { config, g_ab, g_ba, d_a, d_b, adam, epoch: 0, iteration: 0, rng, history: Vec::new() })
    }

    pub fn generator(&self, key: NetworkKey) -> Option<&Generator> {
        match key {
            NetworkKey::GenAB => Some(&self.g_ab),
            NetworkKey::GenBA => Some(&self.g_ba),
            _ => None,
        }
    }

    pub fn discriminator(&self, key: NetworkKey) -> Option<&Discriminator> {
        match key {
            NetworkKey::DiscA => Some(&self.d_a),
            NetworkKey::DiscB => Some(&self.d_b),
            _ => None,
        }
    }

    pub fn lr(&self) -> Result<f64> {
        self.config.schedule().lr_at(self.epoch)
    }

    /// Draws one A batch and one B batch from the sampling stream.
    pub fn sample_batches(&mut self, data: &UnpairedDataset) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let a = sample_patch_batch(&data.a, self.config.patch, self.config.batch, &mut self.rng)?;
        let b = sample_patch_batch(&data.b, self.config.patch, self.config.batch, &mut self.rng)?;
        Ok((a, b))
    }

    /// One generator update followed by one update of each discriminator.
    pub fn train_iteration(&mut self, batch_a: &Tensor<f32>, batch_b: &Tensor<f32>, lr: f64) -> Result<LossReport> {
        let it = self.iteration;
        let numeric = |what: &str, v: f32| -> Result<f64> {
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(Error::numeric(format!("{what} at iteration {it}"), format!("loss is {v}")))
            }
        };
        let weights = self.config.weights();
        let variant = self.config.loss;
        let train = NormMode::Train;

        // Generators.
        let mut tape = Tape::new();
        let p_ab = self.g_ab.bind(&mut tape, true);
        let p_ba = self.g_ba.bind(&mut tape, true);
        let q_a = self.d_a.bind(&mut tape, false);
        let q_b = self.d_b.bind(&mut tape, false);
        let xa = tape.constant(batch_a.clone());
        let xb = tape.constant(batch_b.clone());
        let (fake_b, same_b) = joint_translate(&mut self.g_ab, &mut tape, &p_ab, xa, xb)?;
        let (fake_a, same_a) = joint_translate(&mut self.g_ba, &mut tape, &p_ba, xb, xa)?;
        let cyc_a = self.g_ba.forward(&mut tape, &p_ba, fake_b, train)?;
        let cyc_b = self.g_ab.forward(&mut tape, &p_ab, fake_a, train)?;
        let s_b = fake_scores(&mut self.d_b, &mut tape, &q_b, xb, fake_b)?;
        let s_a = fake_scores(&mut self.d_a, &mut tape, &q_a, xa, fake_a)?;
        let adv_ab = variant.generator_loss(&mut tape, s_b)?;
        let adv_ba = variant.generator_loss(&mut tape, s_a)?;
        let cyclic = cyclic_loss(&mut tape, xa, cyc_a, xb, cyc_b)?;
        let identity = identity_loss(&mut tape, xa, same_a, xb, same_b)?;
        let terms = GeneratorTerms { adv_ab, adv_ba, cyclic, identity };
        let mut report = LossReport {
            g_adv_ab: numeric("g_adv_AB", tape.item(adv_ab))?,
            g_adv_ba: numeric("g_adv_BA", tape.item(adv_ba))?,
            cyclic: numeric("cyclic", tape.item(cyclic))?,
            identity: numeric("identity", tape.item(identity))?,
            ..Default::default()
        };
        let total = total_generator_objective(&mut tape, terms, weights)?;
        report.total_g = numeric("total_G", tape.item(total))?;
        tape.backward(total)?;
        self.g_ab.collect_grads(&tape, &p_ab);
        self.g_ba.collect_grads(&tape, &p_ba);
        let (mut fake_b, mut fake_a) = (tape.value(fake_b).clone(), tape.value(fake_a).clone());
        drop(tape);
        self.adam[0].step(self.g_ab.store_mut(), lr)?;
        self.adam[1].step(self.g_ba.store_mut(), lr)?;

        if self.config.recompute_fakes {
            fake_b = recompute_fakes(&mut self.g_ab, batch_a, batch_b)?;
            fake_a = recompute_fakes(&mut self.g_ba, batch_b, batch_a)?;
        }

        // Discriminators, each on real samples of its domain and detached
        // generated ones.
        report.d_b =
            numeric("d_B", discriminator_step(&mut self.d_b, &mut self.adam[3], batch_b, fake_b, variant, lr)?)?;
        report.d_a =
            numeric("d_A", discriminator_step(&mut self.d_a, &mut self.adam[2], batch_a, fake_a, variant, lr)?)?;
        self.iteration += 1;
        Ok(report)
    }

    /// Runs epochs until `stop_epoch` (or the configured total), logging every
    /// iteration and saving checkpoints when `out` is set.
    pub fn run(&mut self, data: &UnpairedDataset, out: Option<&Path>, stop_epoch: Option<u64>) -> Result<()> {
        let stop = stop_epoch.unwrap_or(self.config.epochs).min(self.config.epochs);
        let per_epoch = self.config.iterations_per_epoch(data);
        let mut log = match out {
            Some(dir) => Some(RunLog::open(dir, &self.config, self.iteration == 0)?),
            None => None,
        };
        while self.epoch < stop {
            let lr = self.lr()?;
            for _ in 0..per_epoch {
                let (a, b) = self.sample_batches(data)?;
                let report = self.train_iteration(&a, &b, lr)?;
                let row = (self.iteration - 1, self.epoch, report);
                if let Some(log) = &mut log {
                    log.row(&row)?;
                }
                self.history.push(row);
            }
            self.epoch += 1;
            if let (Some(log), Some(dir)) = (&mut log, out) {
                log.flush()?;
                // last.ckpt always tracks the newest epoch so any stop can be resumed.
                let ckpt = Checkpoint::from_state(self);
                ckpt.save(&dir.join("last.ckpt"))?;
                let every = self.config.checkpoint_every;
                if self.epoch == stop || (every > 0 && self.epoch.is_multiple_of(every)) {
                    ckpt.save(&dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
                }
            }
        }
        Ok(())
    }
}

struct RunLog {
    csv: BufWriter<File>,
    path: PathBuf,
}

impl RunLog {
    fn open(dir: &Path, config: &TrainConfig, fresh: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("config.toml");
        fs::write(&cfg, config.to_toml()).map_err(|e| Error::io(&cfg, e))?;
        let path = dir.join("losses.csv");
        let file = if fresh { File::create(&path) } else { fs::OpenOptions::new().append(true).open(&path) }
            .map_err(|e| Error::io(&path, e))?;
        let mut log = RunLog { csv: BufWriter::new(file), path };
        if fresh {
            writeln!(log.csv, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&log.path, e))?;
        }
        Ok(log)
    }

    fn row(&mut self, (it, ep, r): &(u64, u64, LossReport)) -> Result<()> {
        writeln!(self.csv, "{}", r.csv_row(*it, *ep)).map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.csv.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn run_generator(g: &mut Generator, x: &Tensor<f32>, mode: NormMode) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let p = g.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = g.forward(&mut tape, &p, xv, mode)?;
    Ok(tape.value(y).clone())
}

/// Translates a batch from the generator's source domain together with one
/// from its target domain in a single train-mode batch. Batch statistics then
/// mix both domains, as the running statistics used at inference do, so the
/// generator cannot tell the domains apart by normalization alone and has to
/// learn from each sample which inputs to leave unchanged.
fn joint_translate(g: &mut Generator, tape: &mut Tape<f32>, p: &[Var], source: Var, target: Var) -> Result<(Var, Var)> {
    let n = tape.value(source).shape()[0];
    let m = tape.value(target).shape()[0];
    let both = tape.concat(&[source, target], 0)?;
    let y = g.forward(tape, p, both, NormMode::Train)?;
    Ok((tape.batch_slice(y, 0, n)?, tape.batch_slice(y, n, m)?))
}

/// Generated samples from the updated generator, batched as in the
/// generator step.
fn recompute_fakes(g: &mut Generator, source: &Tensor<f32>, target: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let p = g.bind(&mut tape, false);
    let (s, t) = (tape.constant(source.clone()), tape.constant(target.clone()));
    let (fake, _) = joint_translate(g, &mut tape, &p, s, t)?;
    Ok(tape.value(fake).clone())
}

/// Scores real and generated samples in one batch so that train-mode batch
/// normalization shares its statistics across both. Scored separately, each
/// batch would be standardized on its own, erasing the difference in noise
/// level that the discriminator is meant to detect.
fn joint_scores(d: &mut Discriminator, tape: &mut Tape<f32>, p: &[Var], real: Var, fake: Var) -> Result<(Var, Var)> {
    let n = tape.value(real).shape()[0];
    let m = tape.value(fake).shape()[0];
    let both = tape.concat(&[real, fake], 0)?;
    let s = d.forward(tape, p, both, NormMode::Train)?;
    Ok((tape.batch_slice(s, 0, n)?, tape.batch_slice(s, n, m)?))
}

/// Scores of generated samples for the generator objective, computed in a
/// joint batch with real ones like the discriminator's own update.
fn fake_scores(d: &mut Discriminator, tape: &mut Tape<f32>, p: &[Var], real: Var, fake: Var) -> Result<Var> {
    joint_scores(d, tape, p, real, fake).map(|(_, sf)| sf)
}

fn discriminator_step(
    d: &mut Discriminator,
    adam: &mut AdamState,
    real: &Tensor<f32>,
    fake: Tensor<f32>,
    variant: LossVariant,
    lr: f64,
) -> Result<f32> {
    let mut tape = Tape::new();
    let p = d.bind(&mut tape, true);
    let real = tape.constant(real.clone());
    let fake = tape.constant(fake);
    let (sr, sf) = joint_scores(d, &mut tape, &p, real, fake)?;
    let loss = variant.discriminator_loss(&mut tape, sr, sf)?;
    let value = tape.item(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(loss)?;
    d.collect_grads(&tape, &p);
    drop(tape);
    adam.step(d.store_mut(), lr)?;
    Ok(value)
}

/// Applies `G_AB` in inference mode to a single HU image of shape `[H,W]`,
/// `[1,H,W]` or `[1,1,H,W]`, normalizing by the image's own maximum. The
/// network's change is scaled back to HU and added to the input, which is
/// the same as denormalizing the output but leaves untouched pixels exact.
pub fn denoise_image(g_ab: &mut Generator, hu: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = crate::metrics::plane(hu)?;
    let (x, max) = crate::phantom::to_network(hu)?;
    let y = run_generator(g_ab, &x.clone().reshape([1, 1, h, w])?, NormMode::Eval)?;
    let data = hu
        .data()
        .iter()
        .zip(x.data().iter().zip(y.data()))
        .map(|(&v, (&xi, &yi))| (v as f64 + (yi - xi) as f64 * max / 2.0) as f32)
        .collect();
    Tensor::new(hu.shape().to_vec(), data)
}

/// Applies a generator in inference mode to the normalized form of each image.
pub fn translate_normalized(g: &mut Generator, img: &DomainImage) -> Result<Tensor<f32>> {
    let (h, w) = crate::metrics::plane(&img.normalized)?;
    let y = run_generator(g, &img.normalized.clone().reshape([1, 1, h, w])?, NormMode::Eval)?;
    y.reshape([h, w])
}
