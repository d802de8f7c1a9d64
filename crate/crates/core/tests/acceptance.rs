//! Acceptance run: one PASS/FAIL line per criterion, each with the measured
//! numbers. Training criteria share four toy runs on a 16-phantom set and
//! are measured on 8 held-out phantoms. A FAIL is reported, not hidden: the
//! process still exits normally so the rest of the suite can run, and the
//! README lists the criteria that do not currently pass.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ctcycle::autodiff::NormMode;
use ctcycle::checkpoint::Checkpoint;
use ctcycle::gradcheck_suite::{check_all, F32_TOLERANCE, F64_TOLERANCE};
use ctcycle::losses::{cyclic_loss, epoch_means, lsgan_discriminator_loss, lsgan_generator_loss};
use ctcycle::metrics::ImageMetrics;
use ctcycle::nn::{Discriminator, DiscriminatorConfig, Generator, Network, PATCH};
use ctcycle::phantom::{
    denormalize, make_unpaired_dataset, normalization_constant, normalize, DatasetRecipe, GroundTruth, UnpairedDataset,
};
use ctcycle::train::{denoise_image, Ablation, TrainConfig, TrainState};
use ctcycle::{Result, Tape, Tensor, Var};

const TRAIN_PHANTOMS: usize = 16;
const TRAIN_SEED: u64 = 11;
const HELD_OUT_PHANTOMS: usize = 8;
const HELD_OUT_SEED: u64 = 99;
/// Iterations averaged when reading a discriminator loss off a run.
const LOSS_WINDOW: usize = 50;

struct Verdicts {
    failed: Vec<String>,
}

impl Verdicts {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        println!("criterion {id} {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn main() {
    let mut v = Verdicts { failed: Vec::new() };
    gradients(&mut v);
    architecture(&mut v);
    closed_form_equilibrium(&mut v);
    shape_and_identity(&mut v);
    training(&mut v).expect("training criteria");
    if v.failed.is_empty() {
        println!("acceptance: all criteria PASS");
    } else {
        println!("acceptance: FAIL {}", v.failed.join(","));
    }
}

fn gradients(v: &mut Verdicts) {
    let start = Instant::now();
    let results = check_all(0).expect("gradient checks run");
    let elapsed = start.elapsed();
    let worst32 = results.iter().map(|r| r.f32.max_rel_error).fold(0.0, f64::max);
    let worst64 = results.iter().map(|r| r.f64.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    v.record(
        "1",
        failing.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "checks={} max_rel_f32={worst32:.3e} (<{F32_TOLERANCE:e}) max_rel_f64={worst64:.3e} (<{F64_TOLERANCE:e}) failing=[{}] time={:.1}s",
            results.len(),
            failing.join(","),
            elapsed.as_secs_f64()
        ),
    );
}

fn architecture(v: &mut Verdicts) {
    let start = Instant::now();
    let mut d = Discriminator::<f32>::new(DiscriminatorConfig::default()).unwrap();
    let rf = d.receptive_field();
    let mut tape = Tape::new();
    let p = d.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros([1, 1, PATCH, PATCH]));
    let s = d.forward(&mut tape, &p, x, NormMode::Eval).unwrap();
    let map = tape.value(s).shape().to_vec();
    let elapsed = start.elapsed();
    v.record(
        "2",
        rf == 70 && map[2..] == [5, 5] && elapsed < Duration::from_secs(1),
        format!(
            "receptive_field={rf} score_map={}x{} from {PATCH}x{PATCH} time={:.3}s",
            map[2],
            map[3],
            elapsed.as_secs_f64()
        ),
    );
}

fn closed_form_equilibrium(v: &mut Verdicts) {
    let mut tape = Tape::<f64>::new();
    let half = Tensor::full([4, 1, 5, 5], 0.5);
    let real = tape.constant(half.clone());
    let fake = tape.constant(half);
    let g = lsgan_generator_loss(&mut tape, fake).unwrap();
    let d = lsgan_discriminator_loss(&mut tape, real, fake).unwrap();
    let (g, d) = (tape.item(g), tape.item(d));
    v.record("3a", g == 0.25 && d == 0.25, format!("generator={g} discriminator={d} (exactly 0.25)"));
}

fn shape_and_identity(v: &mut Verdicts) {
    let start = Instant::now();
    let cfg = TrainConfig::toy().generator;
    let mut zero = Generator::<f32>::new(cfg).unwrap();
    zero.store_mut().zero_convolutions();
    let mut g = Generator::<f32>::new(cfg).unwrap();
    let sizes = [8usize, 9, 17, 33, 64, 100, 127, 128];
    let (mut identity_ok, mut shape_ok) = (true, true);
    for &h in &sizes {
        for &w in &sizes {
            let x = pseudo_random([1, 1, h, w], (h * 131 + w) as u64);
            for mode in [NormMode::Train, NormMode::Eval] {
                identity_ok &= forward(&mut zero, &x, mode).unwrap() == x;
                shape_ok &= forward(&mut g, &x, mode).unwrap().shape() == x.shape();
            }
        }
    }
    let hu = pseudo_random([64, 64], 5).map(|x| x * 1000.0);
    let max = normalization_constant(&hu).unwrap();
    let back = denormalize(&normalize(&hu, max).unwrap(), max).unwrap();
    let round_trip = hu.data().iter().zip(back.data()).map(|(&a, &b)| ((a - b) as f64).abs() / max).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    v.record(
        "7",
        identity_ok && shape_ok && round_trip <= 1e-6,
        format!(
            "zero_weight_identity={identity_ok} shapes_preserved={shape_ok} over {} sizes from {}x{} to {}x{} normalization_round_trip={round_trip:.2e} (relative to the normalization constant) time={:.2}s",
            sizes.len() * sizes.len(),
            sizes[0],
            sizes[0],
            sizes[sizes.len() - 1],
            sizes[sizes.len() - 1],
            elapsed.as_secs_f64()
        ),
    );
}

fn forward(g: &mut Generator, x: &Tensor<f32>, mode: NormMode) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let p = g.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = g.forward(&mut tape, &p, xv, mode)?;
    Ok(tape.value(y).clone())
}

/// Deterministic values in [-1, 1) without pulling in a generator.
fn pseudo_random(shape: impl Into<Vec<usize>>, seed: u64) -> Tensor<f32> {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 40) as f32 / (1u64 << 23) as f32) - 1.0
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

struct Run {
    state: TrainState,
    elapsed: Duration,
}

fn train(cfg: TrainConfig, data: &UnpairedDataset, out: &Path) -> Result<Run> {
    let start = Instant::now();
    let mut state = TrainState::new(cfg)?;
    state.run(data, Some(out), None)?;
    Ok(Run { state, elapsed: start.elapsed() })
}

fn training(v: &mut Verdicts) -> Result<()> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let recipe = DatasetRecipe::default();
    let (data, _) = make_unpaired_dataset(TRAIN_PHANTOMS, &recipe, TRAIN_SEED)?;
    let (held, truth) = make_unpaired_dataset(HELD_OUT_PHANTOMS, &recipe, HELD_OUT_SEED)?;
    let toy = TrainConfig::toy();
    let iterations = toy.epochs * toy.iterations_per_epoch(&data);

    // Identical domains: both discriminators should settle near 0.25.
    let same = recipe.identical_domains();
    let (same_data, _) = make_unpaired_dataset(TRAIN_PHANTOMS, &same, TRAIN_SEED)?;
    let run = train(toy.clone(), &same_data, &dir.path().join("same"))?;
    let (d_a, d_b) = final_discriminator_losses(&run.state);
    v.record(
        "3b",
        (0.2..=0.3).contains(&d_a) && (0.2..=0.3).contains(&d_b) && run.elapsed < Duration::from_secs(15 * 60),
        format!(
            "d_A={d_a:.4} d_B={d_b:.4} (mean of the last {LOSS_WINDOW} of {iterations} iterations, want [0.2, 0.3]) time={:.0}s",
            run.elapsed.as_secs_f64()
        ),
    );

    // Full loss, measured before and after training.
    let init = TrainState::new(toy.clone())?;
    let cycle_init = held_out_cycle(&init, &held)?;
    let full = train(toy.clone(), &data, &dir.path().join("full"))?;
    let gan_only =
        train(TrainConfig { ablation: Ablation::GanOnly, ..toy.clone() }, &data, &dir.path().join("gan_only"))?;

    let (full_a, full_b) = mean_changes(&full.state, &held)?;
    let (_, gan_b) = mean_changes(&gan_only.state, &held)?;
    let ratio = full_b / full_a;
    let matrix = full.elapsed + gan_only.elapsed + run.elapsed;
    v.record(
        "4",
        ratio < 0.2 && full_b < gan_b && matrix < Duration::from_secs(90 * 60),
        format!(
            "full: change_routine={full_b:.2}HU change_low={full_a:.2}HU ratio={ratio:.3} (<0.2); gan_only change_routine={gan_b:.2}HU (full must be smaller); toy runs took {:.0}s",
            matrix.as_secs_f64()
        ),
    );

    denoising(v, &full.state, &held, &truth)?;

    let cycle_after = held_out_cycle(&full.state, &held)?;
    let cycle_ratio = cycle_after.train / cycle_init.train;
    v.record(
        "6",
        cycle_ratio <= 0.5,
        format!(
            "train-mode statistics: {:.4} -> {:.4} ratio={cycle_ratio:.3} (<=0.5); running statistics: {:.4} -> {:.4}",
            cycle_init.train, cycle_after.train, cycle_init.eval, cycle_after.eval
        ),
    );

    reproducibility(v, &toy, &data, dir.path())
}

fn final_discriminator_losses(state: &TrainState) -> (f64, f64) {
    let tail = &state.history[state.history.len().saturating_sub(LOSS_WINDOW)..];
    let n = tail.len() as f64;
    let d_a = tail.iter().map(|r| r.2.d_a).sum::<f64>() / n;
    let d_b = tail.iter().map(|r| r.2.d_b).sum::<f64>() / n;
    (d_a, d_b)
}

/// Mean absolute change in HU that G_AB makes to held-out low-dose and
/// routine-dose images, at inference.
fn mean_changes(state: &TrainState, held: &UnpairedDataset) -> Result<(f64, f64)> {
    let mut g = state.g_ab.clone();
    let mut change = |images: &[ctcycle::phantom::DomainImage]| -> Result<f64> {
        let mut total = 0.0;
        for img in images {
            let out = denoise_image(&mut g, &img.hu)?;
            total += out.data().iter().zip(img.hu.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
                / out.numel() as f64;
        }
        Ok(total / images.len() as f64)
    };
    Ok((change(&held.a)?, change(&held.b)?))
}

fn denoising(v: &mut Verdicts, state: &TrainState, held: &UnpairedDataset, truth: &GroundTruth) -> Result<()> {
    let mut g = state.g_ab.clone();
    let (mut input_std, mut output_std, mut better) = (0.0, 0.0, 0);
    let mut per_image = Vec::new();
    for (i, img) in held.a.iter().enumerate() {
        let out = denoise_image(&mut g, &img.hu)?;
        let m = ImageMetrics::measure(format!("{i}"), &img.hu, &out, Some(&truth.clean_a[i]), &truth.rois_a[i])?;
        input_std += m.input_std;
        output_std += m.output_std;
        let (rin, rout) = (m.input_rmse.unwrap(), m.output_rmse.unwrap());
        if rout < rin {
            better += 1;
        }
        per_image.push(format!("{:.2}/{rin:.1}->{rout:.1}", m.output_std / m.input_std));
    }
    let std_ratio = output_std / input_std;
    v.record(
        "5",
        std_ratio <= 0.7 && better >= 7,
        format!(
            "noise_std_ratio={std_ratio:.3} (<=0.7) rmse_improved={better}/{} (>=7) per_image(std_ratio/rmse)=[{}]",
            held.a.len(),
            per_image.join(" ")
        ),
    );
    Ok(())
}

struct CycleL1 {
    train: f64,
    eval: f64,
}

/// Held-out cycle L1 in normalized units, both directions, forwarded the
/// way training does: each generator sees its two real domains in one
/// batch, then the generated batch on its own. `train` uses batch
/// statistics and `eval` the running ones; networks are cloned so the
/// state itself is untouched.
fn held_out_cycle(state: &TrainState, held: &UnpairedDataset) -> Result<CycleL1> {
    let stack = |images: &[ctcycle::phantom::DomainImage]| -> Result<Tensor<f32>> {
        let items: Vec<Tensor<f32>> = images
            .iter()
            .map(|img| {
                let s = img.normalized.shape().to_vec();
                img.normalized.clone().reshape([1, 1, s[0], s[1]])
            })
            .collect::<Result<_>>()?;
        Tensor::stack_batch(&items)
    };
    let (xa, xb) = (stack(&held.a)?, stack(&held.b)?);
    let measure = |mode: NormMode| -> Result<f64> {
        let (mut g_ab, mut g_ba) = (state.g_ab.clone(), state.g_ba.clone());
        let mut tape = Tape::new();
        let p_ab = g_ab.bind(&mut tape, false);
        let p_ba = g_ba.bind(&mut tape, false);
        let (a, b) = (tape.constant(xa.clone()), tape.constant(xb.clone()));
        let fake_b = joint(&mut g_ab, &mut tape, &p_ab, a, b, mode)?;
        let fake_a = joint(&mut g_ba, &mut tape, &p_ba, b, a, mode)?;
        let cyc_a = g_ba.forward(&mut tape, &p_ba, fake_b, mode)?;
        let cyc_b = g_ab.forward(&mut tape, &p_ab, fake_a, mode)?;
        let l = cyclic_loss(&mut tape, a, cyc_a, b, cyc_b)?;
        Ok(tape.item(l) as f64)
    };
    Ok(CycleL1 { train: measure(NormMode::Train)?, eval: measure(NormMode::Eval)? })
}

fn joint(g: &mut Generator, tape: &mut Tape<f32>, p: &[Var], source: Var, target: Var, mode: NormMode) -> Result<Var> {
    let n = tape.value(source).shape()[0];
    let both = tape.concat(&[source, target], 0)?;
    let y = g.forward(tape, p, both, mode)?;
    tape.batch_slice(y, 0, n)
}

/// A second run with the same seed, interrupted halfway and resumed from
/// its checkpoint, must match the uninterrupted full-loss run byte for byte.
fn reproducibility(v: &mut Verdicts, toy: &TrainConfig, data: &UnpairedDataset, root: &Path) -> Result<()> {
    let out = root.join("resumed");
    let half = toy.epochs / 2;
    let mut first = TrainState::new(toy.clone())?;
    first.run(data, Some(&out), Some(half))?;
    drop(first);
    let mut second = Checkpoint::load(&out.join("last.ckpt"))?.into_state()?;
    second.run(data, Some(&out), None)?;
    let reference = fs::read(root.join("full/losses.csv")).expect("full-run losses");
    let resumed = fs::read(out.join("losses.csv")).expect("resumed losses");
    let csv_equal = reference == resumed;
    let ckpt_equal = fs::read(root.join("full/last.ckpt")).ok() == fs::read(out.join("last.ckpt")).ok();
    let epochs = epoch_means(&ctcycle::losses::parse_loss_csv(&String::from_utf8_lossy(&resumed))?).len();
    v.record(
        "8",
        csv_equal && ckpt_equal,
        format!(
            "same-seed run resumed after epoch {half}: losses.csv identical={csv_equal} ({} bytes, {epochs} epochs) final checkpoint identical={ckpt_equal}",
            resumed.len()
        ),
    );
    Ok(())
}
