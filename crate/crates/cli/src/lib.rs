//! Subcommands of the `ctcycle` tool. `main` parses arguments and maps
//! [`CliError`] to an exit status; everything else lives here so the
//! integration tests can drive commands in-process.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ctcycle::checkpoint::Checkpoint;
use ctcycle::eval::{evaluate, load_eval_items};
use ctcycle::gradcheck_suite::{check_all, check_network, check_op, CheckResult};
use ctcycle::losses::{epoch_means_csv, parse_loss_csv};
use ctcycle::nn::{Discriminator, DiscriminatorConfig, NetworkKey};
use ctcycle::phantom::{make_unpaired_dataset, read_dataset, write_dataset, DatasetRecipe, RoiFile};
use ctcycle::train::{denoise_image, Ablation, TrainConfig, TrainState};
use ctcycle::{Error, Tensor};

#[derive(Debug, Parser)]
#[command(name = "ctcycle", version, about = "Unpaired cycle-consistent denoising of low-dose CT phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render an unpaired phantom dataset with clean ground truth and ROIs.
    Simulate {
        /// Phantoms per domain.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Dose fraction of domain A relative to routine dose.
        #[arg(long, default_value_t = 0.2)]
        low_dose: f64,
        /// Peak cardiac displacement in pixels at the nominal phase.
        #[arg(long, default_value_t = 4.0)]
        amplitude: f64,
        /// Draw both domains from the routine-dose reference-phase recipe.
        #[arg(long)]
        identical_domains: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the four networks, writing losses.csv, config.toml and checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML run configuration; overrides --profile.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in configuration when no --config is given.
        #[arg(long, default_value = "toy", value_parser = ["toy", "full_scale"])]
        profile: String,
        #[arg(long, value_parser = ["full", "no_identity", "gan_only"])]
        ablation: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many completed epochs instead of the configured total.
        #[arg(long)]
        stop_epoch: Option<u64>,
        /// Continue from OUT/last.ckpt with the configuration stored in it.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise one TSR1 image with the low-to-routine generator of a checkpoint.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise every dataset image and write the metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// ROI file; defaults to DATA/rois.toml.
        #[arg(long)]
        rois: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reverse-mode gradients with central finite differences.
    Gradcheck {
        /// Check a single op.
        #[arg(long, conflicts_with_all = ["full_generator", "discriminator"])]
        op: Option<String>,
        /// Check the generator composed with a discriminator.
        #[arg(long)]
        full_generator: bool,
        /// Check the discriminator objective.
        #[arg(long)]
        discriminator: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the discriminator receptive field in pixels.
    Rf,
    /// Reduce a loss CSV to per-epoch means.
    PlotData {
        #[arg(long)]
        losses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure with its exit status: 2 usage, 3 data, 4 numeric.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Display) -> Self {
        CliError { kind: "usage", code: 2, message: message.to_string() }
    }

    fn numeric(message: impl Display) -> Self {
        CliError { kind: "numeric", code: 4, message: message.to_string() }
    }

    fn output(path: &Path, e: std::io::Error) -> Self {
        CliError::from(Error::Io { path: path.to_path_buf(), source: e })
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }

    /// `error kind=<kind> code=<code>: <message>` on one line.
    pub fn line(&self) -> String {
        let msg: String = self.message.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
        format!("error kind={} code={}: {}", self.kind, self.code, msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Contract(_) => ("contract", 2),
            Error::Numeric { .. } => ("numeric", 4),
            Error::Dimension(_) => ("dimension", 3),
            Error::Spec(_) => ("spec", 3),
            Error::Format(_) => ("format", 3),
            Error::Load(_) => ("load", 3),
            Error::Io { .. } => ("io", 3),
        };
        CliError { kind, code, message: e.to_string() }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Runs one parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Simulate { n, size, low_dose, amplitude, identical_domains, seed, out: dir } => {
            simulate(&SimulateOptions { n, size, low_dose, amplitude, identical_domains, seed }, &dir, out)
        }
        Command::Train { data, config, profile, ablation, seed, stop_epoch, resume, out: dir } => {
            let opts = TrainOptions { config, profile, ablation, seed, stop_epoch, resume };
            train(&data, &opts, &dir, out)
        }
        Command::Denoise { ckpt, input, out: path } => denoise(&ckpt, &input, &path, out),
        Command::Eval { ckpt, data, rois, out: path } => eval(&ckpt, &data, rois.as_deref(), &path, out),
        Command::Gradcheck { op, full_generator, discriminator, seed } => {
            gradcheck(op.as_deref(), full_generator, discriminator, seed, out)
        }
        Command::Rf => {
            let d = Discriminator::<f32>::new(DiscriminatorConfig::default())?;
            say(out, d.receptive_field())
        }
        Command::PlotData { losses, out: path } => plot_data(&losses, &path, out),
    }
}

fn say(out: &mut dyn Write, line: impl Display) -> CliResult {
    writeln!(out, "{line}").map_err(|e| CliError::output(Path::new("<stdout>"), e))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

struct SimulateOptions {
    n: usize,
    size: usize,
    low_dose: f64,
    amplitude: f64,
    identical_domains: bool,
    seed: u64,
}

fn simulate(opts: &SimulateOptions, dir: &Path, out: &mut dyn Write) -> CliResult {
    let mut recipe = DatasetRecipe { size: opts.size, deformation_amplitude: opts.amplitude, ..Default::default() };
    recipe.a.dose = opts.low_dose;
    if opts.identical_domains {
        recipe = recipe.identical_domains();
    }
    let (data, truth) = make_unpaired_dataset(opts.n, &recipe, opts.seed)?;
    write_dataset(dir, &data, &truth)?;
    say(out, format!("simulated {} images per domain of {}x{} into {}", opts.n, opts.size, opts.size, dir.display()))
}

struct TrainOptions {
    config: Option<PathBuf>,
    profile: String,
    ablation: Option<String>,
    seed: Option<u64>,
    stop_epoch: Option<u64>,
    resume: bool,
}

fn train(data_dir: &Path, opts: &TrainOptions, dir: &Path, out: &mut dyn Write) -> CliResult {
    let data = read_dataset(data_dir)?;
    let mut state = if opts.resume {
        if opts.config.is_some() || opts.ablation.is_some() || opts.seed.is_some() {
            return Err(CliError::usage(
                "--resume takes the configuration from the checkpoint; drop --config, --ablation and --seed",
            ));
        }
        Checkpoint::load(&dir.join("last.ckpt"))?.into_state()?
    } else {
        let mut cfg = match &opts.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::from(Error::Io { path: path.clone(), source: e }))?;
                TrainConfig::parse_toml(&text)?
            }
            None => TrainConfig::profile(&opts.profile)?,
        };
        if let Some(a) = &opts.ablation {
            cfg.ablation = Ablation::parse(a)?;
        }
        if let Some(s) = opts.seed {
            cfg.seed = s;
        }
        TrainState::new(cfg)?
    };
    state.run(&data, Some(dir), opts.stop_epoch)?;
    say(
        out,
        format!(
            "trained epoch={} iteration={} ablation={} out={}",
            state.epoch,
            state.iteration,
            state.config.ablation.name(),
            dir.display()
        ),
    )
}

fn denoise(ckpt: &Path, input: &Path, path: &Path, out: &mut dyn Write) -> CliResult {
    let mut g = Checkpoint::load(ckpt)?.generator(NetworkKey::GenAB)?;
    let image = Tensor::load(input)?;
    let result = denoise_image(&mut g, &image)?;
    result.save(path)?;
    say(out, format!("denoised {} -> {}", input.display(), path.display()))
}

fn eval(ckpt: &Path, data: &Path, rois: Option<&Path>, path: &Path, out: &mut dyn Write) -> CliResult {
    let g = Checkpoint::load(ckpt)?.generator(NetworkKey::GenAB)?;
    let rois_path = rois.map_or_else(|| data.join("rois.toml"), Path::to_path_buf);
    let rois = RoiFile::load(&rois_path)?;
    let items = load_eval_items(data, &rois)?;
    let report = evaluate(&g, &items)?;
    write_file(path, &report.to_csv())?;
    say(out, format!("evaluated {} images -> {}", report.rows.len(), path.display()))
}

fn gradcheck(op: Option<&str>, full_generator: bool, discriminator: bool, seed: u64, out: &mut dyn Write) -> CliResult {
    let mut results: Vec<CheckResult> = Vec::new();
    if let Some(name) = op {
        results.push(check_op(name, seed)?);
    }
    if full_generator {
        results.push(check_network("full_generator", seed)?);
    }
    if discriminator {
        results.push(check_network("discriminator", seed)?);
    }
    if results.is_empty() {
        results = check_all(seed)?;
    }
    for r in &results {
        say(out, r.line())?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(format!("gradcheck exceeded tolerance for {}", failed.join(","))))
    }
}

fn plot_data(losses: &Path, path: &Path, out: &mut dyn Write) -> CliResult {
    let text =
        fs::read_to_string(losses).map_err(|e| CliError::from(Error::Io { path: losses.to_path_buf(), source: e }))?;
    let rows = parse_loss_csv(&text)?;
    let csv = epoch_means_csv(&rows);
    write_file(path, &csv)?;
    say(out, format!("wrote {} epoch rows -> {}", csv.lines().count() - 1, path.display()))
}
