//! Central finite-difference verification of the reverse pass.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Largest `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coords_checked: usize,
    /// Coordinates left out because the function is not smooth inside the
    /// step interval (see [`compare`]).
    pub kinks_skipped: usize,
}

impl GradcheckReport {
    /// Error below `tol` with at most a quarter of the coordinates skipped.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.kinks_skipped * 4 <= self.coords_checked + self.kinks_skipped
    }
}

/// A scalar function that can be evaluated at any precision.
///
/// Implementors build the same computation on whichever tape they are given,
/// so the f32 reverse pass can be compared against f64 finite differences.
pub trait ScalarFn {
    fn eval<T: Real>(&mut self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Checks `d f(x) / dx` for a scalar-valued `f` of one tensor.
pub fn gradcheck<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<GradcheckReport>
where
    T: Real,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, None)
}

/// Checks every input of a scalar function of several tensors, with finite
/// differences taken at the same precision as the analytic gradient.
///
/// When `max_coords_per_input` is set, an evenly strided subset of each
/// input's coordinates is perturbed instead of all of them.
pub fn gradcheck_many<T, F>(
    mut f: F,
    inputs: &[Tensor<T>],
    h: T,
    max_coords_per_input: Option<usize>,
) -> Result<GradcheckReport>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= T::zero() {
        return Err(Error::contract("gradcheck step must be positive"));
    }
    let analytic = analytic_grads(&mut f, inputs)?;
    let mut probe = inputs.to_vec();
    compare(&analytic, h.as_f64(), max_coords_per_input, |ti, idx, delta| {
        let orig = probe[ti].data()[idx];
        probe[ti].data_mut()[idx] = orig + T::from_f64(delta);
        let v = eval_constant(&mut f, &probe);
        probe[ti].data_mut()[idx] = orig;
        v
    })
}

/// Checks the f32 reverse pass of `f` against central differences of the
/// same function evaluated in f64.
pub fn gradcheck_mixed<F: ScalarFn>(
    f: &mut F,
    inputs: &[Tensor<f32>],
    h: f64,
    max_coords_per_input: Option<usize>,
) -> Result<GradcheckReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::contract("gradcheck step must be positive"));
    }
    let analytic = analytic_grads(&mut |t: &mut Tape<f32>, v: &[Var]| f.eval(t, v), inputs)?;
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    compare(&analytic, h, max_coords_per_input, |ti, idx, delta| {
        let orig = probe[ti].data()[idx];
        probe[ti].data_mut()[idx] = orig + delta;
        let v = eval_constant(&mut |t: &mut Tape<f64>, v: &[Var]| f.eval(t, v), &probe);
        probe[ti].data_mut()[idx] = orig;
        v
    })
}

fn analytic_grads<T, F>(f: &mut F, inputs: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::contract("gradcheck function must return a scalar"));
    }
    check_scalar(tape.item(out).as_f64(), "forward value", 0, 0)?;
    tape.backward(out)?;
    vars.iter()
        .zip(inputs)
        .enumerate()
        .map(|(ti, (&v, t))| {
            let g: Vec<f64> =
                tape.grad(v).map_or_else(|| vec![0.0; t.numel()], |g| g.iter().map(|x| x.as_f64()).collect());
            if let Some(idx) = g.iter().position(|x| !x.is_finite()) {
                return Err(non_finite("analytic gradient", ti, idx));
            }
            Ok(g)
        })
        .collect()
}

fn eval_constant<T, F>(f: &mut F, probe: &[Tensor<T>]) -> Result<f64>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.item(out).as_f64())
}

/// Relative disagreement between the central differences at `h` and `h/2`
/// above which the interval is taken to contain a point where the function
/// is not differentiable, such as a relu switching sign. For a smooth
/// function the two agree to `O(h^2)`.
const KINK_SCREEN: f64 = 1e-6;

/// Compares analytic gradients against central differences. A coordinate
/// whose differences at `h` and `h/2` disagree is skipped and counted rather
/// than compared, since no derivative exists across the kink; a wrong
/// backward rule still disagrees with both consistent differences.
fn compare(
    analytic: &[Vec<f64>],
    h: f64,
    max_coords_per_input: Option<usize>,
    mut eval: impl FnMut(usize, usize, f64) -> Result<f64>,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport { max_rel_error: 0.0, worst: (0, 0), coords_checked: 0, kinks_skipped: 0 };
    for (ti, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let step = max_coords_per_input.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for idx in (0..n).step_by(step) {
            let mut central = |h: f64| -> Result<f64> {
                let plus = eval(ti, idx, h)?;
                let minus = eval(ti, idx, -h)?;
                check_scalar(plus, "perturbed value", ti, idx)?;
                check_scalar(minus, "perturbed value", ti, idx)?;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = central(h)?;
            let half = central(h / 2.0)?;
            if (numeric - half).abs() > KINK_SCREEN * (numeric.abs() + half.abs()) + 1e-10 {
                report.kinks_skipped += 1;
                continue;
            }
            let a = grads[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, idx);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

fn check_scalar(v: f64, what: &str, input: usize, coord: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(non_finite(what, input, coord))
    }
}

fn non_finite(what: &str, input: usize, coord: usize) -> Error {
    Error::numeric(format!("gradcheck {what}"), format!("non-finite at input {input} coordinate {coord}"))
}
