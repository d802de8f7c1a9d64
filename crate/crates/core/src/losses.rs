//! Adversarial, cyclic and identity objectives of the cycle system.
//!
//! All functions record onto a caller-owned [`Tape`] so the result is a
//! differentiable scalar. L1 terms are per-element means.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the cyclic term.
    pub lambda_cyc: f64,
    /// Weight of the identity term.
    pub gamma_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cyc: 10.0, gamma_id: 5.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_cyc: f64, gamma_id: f64) -> Result<Self> {
        let w = LossWeights { lambda_cyc, gamma_id };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cyc", self.lambda_cyc), ("gamma_id", self.gamma_id)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Adversarial objective family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Least-squares scores against targets 1 (real) and 0 (fake).
    #[default]
    Lsgan,
    /// Sigmoid cross-entropy on raw scores. The generator side uses the
    /// non-saturating form `-log sigmoid(score)`.
    OriginalGan,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Lsgan => "lsgan",
            LossVariant::OriginalGan => "original_gan",
        }
    }

    pub fn generator_loss<T: Real>(self, tape: &mut Tape<T>, fake_scores: Var) -> Result<Var> {
        match self {
            LossVariant::Lsgan => lsgan_generator_loss(tape, fake_scores),
            LossVariant::OriginalGan => bce_generator_loss(tape, fake_scores),
        }
    }

    pub fn discriminator_loss<T: Real>(self, tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
        match self {
            LossVariant::Lsgan => lsgan_discriminator_loss(tape, real_scores, fake_scores),
            LossVariant::OriginalGan => bce_discriminator_loss(tape, real_scores, fake_scores),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn mean_sq_to<T: Real>(tape: &mut Tape<T>, scores: Var, target: f64) -> Result<Var> {
    let d = tape.add_scalar(scores, T::from_f64(-target));
    let sq = tape.square(d);
    tape.mean_all(sq)
}

/// `mean((s - 1)^2)` over the score map of generated images.
pub fn lsgan_generator_loss<T: Real>(tape: &mut Tape<T>, fake_scores: Var) -> Result<Var> {
    mean_sq_to(tape, fake_scores, 1.0)
}

/// `0.5 mean((r - 1)^2) + 0.5 mean(f^2)`. The fake scores must come from a
/// detached copy of the generated batch.
pub fn lsgan_discriminator_loss<T: Real>(tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let r = mean_sq_to(tape, real_scores, 1.0)?;
    let f = mean_sq_to(tape, fake_scores, 0.0)?;
    let sum = tape.add(r, f)?;
    Ok(tape.mul_scalar(sum, T::from_f64(0.5)))
}

/// `mean(softplus(-s))`, i.e. `-mean(log sigmoid(s))`.
pub fn bce_generator_loss<T: Real>(tape: &mut Tape<T>, fake_scores: Var) -> Result<Var> {
    let neg = tape.mul_scalar(fake_scores, -T::one());
    let sp = tape.softplus(neg);
    tape.mean_all(sp)
}

/// `mean(softplus(-r)) + mean(softplus(f))`, the cross-entropy of a sigmoid
/// classifier labelling real as 1 and fake as 0.
pub fn bce_discriminator_loss<T: Real>(tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let neg = tape.mul_scalar(real_scores, -T::one());
    let r = tape.softplus(neg);
    let r = tape.mean_all(r)?;
    let f = tape.softplus(fake_scores);
    let f = tape.mean_all(f)?;
    tape.add(r, f)
}

/// Mean absolute difference.
pub fn l1_mean<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let abs = tape.abs_val(d);
    tape.mean_all(abs)
}

/// `|G_BA(G_AB(x_A)) - x_A| + |G_AB(G_BA(x_B)) - x_B|`, from the two round
/// trips already computed on the tape.
pub fn cyclic_loss<T: Real>(tape: &mut Tape<T>, x_a: Var, cycle_a: Var, x_b: Var, cycle_b: Var) -> Result<Var> {
    let a = l1_mean(tape, cycle_a, x_a)?;
    let b = l1_mean(tape, cycle_b, x_b)?;
    tape.add(a, b)
}

/// `|G_AB(x_B) - x_B| + |G_BA(x_A) - x_A|`.
pub fn identity_loss<T: Real>(tape: &mut Tape<T>, x_a: Var, same_a: Var, x_b: Var, same_b: Var) -> Result<Var> {
    let b = l1_mean(tape, same_b, x_b)?;
    let a = l1_mean(tape, same_a, x_a)?;
    tape.add(b, a)
}

/// Generator-side loss terms as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub adv_ab: Var,
    pub adv_ba: Var,
    pub cyclic: Var,
    pub identity: Var,
}

/// `adv_ab + adv_ba + lambda * cyclic + gamma * identity`.
///
/// Every component is checked for finiteness first; a zero weight drops its
/// term from the graph entirely so it contributes no gradient.
pub fn total_generator_objective<T: Real>(tape: &mut Tape<T>, terms: GeneratorTerms, w: LossWeights) -> Result<Var> {
    w.validate()?;
    for (name, v) in
        [("g_adv_AB", terms.adv_ab), ("g_adv_BA", terms.adv_ba), ("cyclic", terms.cyclic), ("identity", terms.identity)]
    {
        let x = tape.item(v);
        if !x.is_finite() {
            return Err(Error::numeric(name, format!("loss component is {x}")));
        }
    }
    let mut total = tape.add(terms.adv_ab, terms.adv_ba)?;
    for (weight, v) in [(w.lambda_cyc, terms.cyclic), (w.gamma_id, terms.identity)] {
        if weight != 0.0 {
            let scaled = tape.mul_scalar(v, T::from_f64(weight));
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Per-iteration scalars, in CSV column order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub g_adv_ab: f64,
    pub g_adv_ba: f64,
    pub d_a: f64,
    pub d_b: f64,
    pub cyclic: f64,
    pub identity: f64,
    pub total_g: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,epoch,g_adv_AB,g_adv_BA,d_A,d_B,cyclic,identity,total_G";

impl LossReport {
    pub fn values(&self) -> [f64; 7] {
        [self.g_adv_ab, self.g_adv_ba, self.d_a, self.d_b, self.cyclic, self.identity, self.total_g]
    }

    fn from_values(v: [f64; 7]) -> Self {
        LossReport { g_adv_ab: v[0], g_adv_ba: v[1], d_a: v[2], d_b: v[3], cyclic: v[4], identity: v[5], total_g: v[6] }
    }

    /// Recomputes `total_g` from the parts.
    pub fn weighted_total(&self, w: LossWeights) -> f64 {
        self.g_adv_ab + self.g_adv_ba + w.lambda_cyc * self.cyclic + w.gamma_id * self.identity
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        const NAMES: [&str; 7] = ["g_adv_AB", "g_adv_BA", "d_A", "d_B", "cyclic", "identity", "total_G"];
        self.values().iter().position(|v| !v.is_finite()).map(|i| NAMES[i])
    }

    /// One CSV row. Values use the shortest representation that round-trips.
    pub fn csv_row(&self, iteration: u64, epoch: u64) -> String {
        let mut row = format!("{iteration},{epoch}");
        for v in self.values() {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }

    /// Parses a row written by [`LossReport::csv_row`].
    pub fn parse_csv_row(line: &str) -> Result<(u64, u64, LossReport)> {
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
        if fields.len() != 9 {
            return Err(Error::format(format!("loss row has {} fields, expected 9", fields.len())));
        }
        let int = |s: &str, what: &str| {
            s.trim().parse::<u64>().map_err(|_| Error::format(format!("loss row: bad {what} {s:?}")))
        };
        let iteration = int(fields[0], "iteration")?;
        let epoch = int(fields[1], "epoch")?;
        let mut v = [0.0; 7];
        for (slot, s) in v.iter_mut().zip(&fields[2..]) {
            *slot = s.trim().parse().map_err(|_| Error::format(format!("loss row: bad value {s:?}")))?;
        }
        Ok((iteration, epoch, LossReport::from_values(v)))
    }
}

/// Parses a whole loss CSV, header included.
pub fn parse_loss_csv(text: &str) -> Result<Vec<(u64, u64, LossReport)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == LOSS_CSV_HEADER => {}
        other => return Err(Error::format(format!("loss CSV header mismatch: {other:?}"))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(LossReport::parse_csv_row).collect()
}

pub const EPOCH_CSV_HEADER: &str = "epoch,iterations,g_adv_AB,g_adv_BA,d_A,d_B,cyclic,identity,total_G";

/// Mean of every loss column per epoch, in order of first appearance.
pub fn epoch_means(rows: &[(u64, u64, LossReport)]) -> Vec<(u64, usize, LossReport)> {
    let mut out: Vec<(u64, usize, [f64; 7])> = Vec::new();
    for (_, epoch, r) in rows {
        match out.iter_mut().find(|(e, _, _)| e == epoch) {
            Some((_, n, sums)) => {
                *n += 1;
                sums.iter_mut().zip(r.values()).for_each(|(s, v)| *s += v);
            }
            None => out.push((*epoch, 1, r.values())),
        }
    }
    out.into_iter().map(|(e, n, sums)| (e, n, LossReport::from_values(sums.map(|s| s / n as f64)))).collect()
}

/// CSV of [`epoch_means`] under [`EPOCH_CSV_HEADER`].
pub fn epoch_means_csv(rows: &[(u64, u64, LossReport)]) -> String {
    let mut out = format!("{EPOCH_CSV_HEADER}\n");
    for (epoch, n, r) in epoch_means(rows) {
        out.push_str(&r.csv_row(epoch, n as u64));
        out.push('\n');
    }
    out
}
