//! Named gradient checks shared by the test suite and the command line:
//! every differentiable tape operation, and the generator and
//! discriminator evaluated end to end with respect to their inputs and
//! parameters.
//!
//! Each check runs twice. The f32 reverse pass is compared against central
//! differences of the same function evaluated in f64, and a pure f64 pass is
//! compared against f64 differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck_mixed, BatchNormConfig, GradcheckReport, NormMode, ScalarFn, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{lsgan_discriminator_loss, lsgan_generator_loss};
use crate::nn::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Network, ParamKind, TailConfig};
use crate::real::Real;
use crate::tensor::Tensor;

/// Largest accepted relative error of the f32 reverse pass.
pub const F32_TOLERANCE: f64 = 1e-3;
/// Largest accepted relative error of the f64 reverse pass.
pub const F64_TOLERANCE: f64 = 1e-6;

/// Central-difference step of the pure f64 checks. Small enough that the
/// truncation error of smooth ops stays far below tolerance, large enough
/// that rounding does not swamp small gradient components.
pub const F64_STEP: f64 = 1e-5;

/// Single operations covered by [`check_op`].
pub const OP_NAMES: [&str; 12] = [
    "relu",
    "leaky_relu",
    "square",
    "abs",
    "softplus",
    "mul_add_scalar",
    "add_sub",
    "conv2d",
    "batch_norm",
    "concat",
    "reflect_pad_crop",
    "batch_slice",
];

/// Composite checks covered by [`check_network`].
pub const NETWORK_NAMES: [&str; 2] = ["full_generator", "discriminator"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub f32: GradcheckReport,
    pub f64: GradcheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.f32.passes(F32_TOLERANCE) && self.f64.passes(F64_TOLERANCE)
    }

    /// `name f32=<err> f64=<err> checked=<n> skipped=<n> PASS|FAIL`.
    pub fn line(&self) -> String {
        format!(
            "{} f32={:.3e} f64={:.3e} checked={} skipped={} {}",
            self.name,
            self.f32.max_rel_error,
            self.f64.max_rel_error,
            self.f64.coords_checked,
            self.f64.kinks_skipped,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Uniform values with magnitude in [0.05, 1] and random sign, keeping
/// inputs away from the kinks of relu and abs.
pub fn away_from_zero<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        T::from_f64(if rng.random_bool(0.5) { m } else { -m })
    })
}

/// Fixed pseudo-random target used to turn an op output into a scalar.
fn target<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |i| T::from_f64(((i * 37 % 19) as f64 - 9.0) / 10.0))
}

fn squared_error<T: Real>(t: &mut Tape<T>, y: Var) -> Result<Var> {
    let r = t.constant(target(t.value(y).shape()));
    let d = t.sub(y, r)?;
    let s = t.square(d);
    t.mean_all(s)
}

/// One operation wrapped into a scalar loss `mean((op(x) - r)^2)`.
#[derive(Clone, Copy, Debug)]
pub struct OpCase(&'static str);

impl OpCase {
    pub fn new(name: &str) -> Result<Self> {
        OP_NAMES
            .into_iter()
            .find(|n| *n == name)
            .map(OpCase)
            .ok_or_else(|| Error::contract(format!("unknown op {name:?}; expected one of {}", OP_NAMES.join(", "))))
    }
}

impl ScalarFn for OpCase {
    fn eval<T: Real>(&mut self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let v = v[0];
        let y = match self.0 {
            "relu" => t.relu(v),
            "leaky_relu" => t.leaky_relu(v, T::from_f64(0.2)),
            "square" => t.square(v),
            "abs" => t.abs_val(v),
            "softplus" => t.softplus(v),
            "mul_add_scalar" => {
                let y = t.mul_scalar(v, T::from_f64(3.0));
                t.add_scalar(y, T::from_f64(-0.5))
            }
            "add_sub" => {
                let y = t.add(v, v)?;
                t.sub(y, v)?
            }
            "conv2d" => {
                let w = t.constant(Tensor::from_fn([2, 2, 3, 3], |i| T::from_f64(((i % 7) as f64 - 3.0) / 3.0)));
                let b = t.constant(Tensor::from_fn([2], |i| T::from_f64(0.1 * i as f64)));
                t.conv2d(v, w, Some(b), 1, 1)?
            }
            "batch_norm" => {
                let g = t.constant(Tensor::full([2], T::from_f64(1.3)));
                let b = t.constant(Tensor::full([2], T::from_f64(-0.2)));
                let (mut rm, mut rv) = (Tensor::zeros([2]), Tensor::full([2], T::one()));
                t.batch_norm(v, g, b, &mut rm, &mut rv, NormMode::Train, BatchNormConfig::default())?
            }
            "concat" => t.concat(&[v, v], 1)?,
            "reflect_pad_crop" => {
                let p = t.reflect_pad(v, 2, 3)?;
                t.crop(p, 1, 1, 4, 5)?
            }
            "batch_slice" => {
                let a = t.batch_slice(v, 1, 1)?;
                let b = t.batch_slice(v, 0, 2)?;
                let b = t.mul_scalar(b, T::from_f64(0.5));
                t.concat(&[a, b], 0)?
            }
            other => return Err(Error::contract(format!("unknown op {other:?}"))),
        };
        squared_error(t, y)
    }
}

/// Input shape used by the single-op checks.
pub const OP_INPUT_SHAPE: [usize; 4] = [2, 2, 4, 4];

/// Checks one operation on a seeded input.
pub fn check_op(name: &str, seed: u64) -> Result<CheckResult> {
    let mut case = OpCase::new(name)?;
    let x32 = away_from_zero::<f32>(&OP_INPUT_SHAPE, seed);
    let f32 = gradcheck_mixed(&mut case, std::slice::from_ref(&x32), 1e-4, None)?;
    let x64 = away_from_zero::<f64>(&OP_INPUT_SHAPE, seed);
    let f64 = crate::autodiff::gradcheck_many(|t, v| case.eval(t, v), std::slice::from_ref(&x64), F64_STEP, None)?;
    Ok(CheckResult { name: name.to_string(), f32, f64 })
}

/// Which network the composite loss differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Composite {
    /// `lsgan_g(D(G(x))) + mean((G(x) - r)^2)` with respect to `x`, every
    /// generator parameter and every discriminator parameter.
    FullGenerator,
    /// `lsgan_d(D(real), D(fake))` with respect to both images and every
    /// discriminator parameter.
    Discriminator,
}

/// Small networks whose parameters are supplied as gradcheck inputs.
struct NetworkCase {
    kind: Composite,
    g: Generator<f64>,
    d: Discriminator<f64>,
    /// Per parameter (generator first, then discriminator): `None` when it
    /// is a gradcheck input, otherwise the value bound as a constant.
    frozen: Vec<Option<Tensor<f64>>>,
}

impl NetworkCase {
    /// Parameter handles in network order, taking checked parameters from
    /// `inputs` and binding frozen ones as constants.
    fn bind<T: Real>(&self, t: &mut Tape<T>, mut inputs: impl Iterator<Item = Var>) -> Vec<Var> {
        self.frozen
            .iter()
            .map(|f| match f {
                Some(value) => t.constant(value.cast()),
                None => inputs.next().expect("one input per checked parameter"),
            })
            .collect()
    }
}

/// A convolution bias feeding straight into batch normalization has an
/// identically zero gradient, since normalization removes any per-channel
/// shift; relative error is meaningless there.
fn cancelled_by_norm<N: Network<f64>>(net: &N) -> Vec<bool> {
    let p = net.params();
    (0..p.len())
        .map(|i| p[i].kind == ParamKind::ConvBias && p.get(i + 1).is_some_and(|n| n.kind == ParamKind::NormGamma))
        .collect()
}

impl ScalarFn for NetworkCase {
    fn eval<T: Real>(&mut self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let mode = NormMode::Train;
        let mut d = self.d.cast::<T>();
        let images = match self.kind {
            Composite::FullGenerator => 1,
            Composite::Discriminator => 2,
        };
        let params = self.bind(t, v[images..].iter().copied());
        let (gp, dp) = params.split_at(self.g.params().len());
        match self.kind {
            Composite::FullGenerator => {
                let mut g = self.g.cast::<T>();
                let y = g.forward(t, gp, v[0], mode)?;
                let s = d.forward(t, dp, y, mode)?;
                let adv = lsgan_generator_loss(t, s)?;
                let fit = squared_error(t, y)?;
                t.add(adv, fit)
            }
            Composite::Discriminator => {
                let sr = d.forward(t, dp, v[0], mode)?;
                let sf = d.forward(t, dp, v[1], mode)?;
                lsgan_discriminator_loss(t, sr, sf)
            }
        }
    }
}

/// Parameters drawn well away from the tiny initialization scale so every
/// path through the network carries a gradient of useful size.
fn randomize<N: Network<f64>>(net: &mut N, rng: &mut ChaCha8Rng) {
    for p in net.store_mut().params_mut() {
        let shape = p.value.shape().to_vec();
        let value = Tensor::from_fn(shape, |_| match p.kind {
            ParamKind::NormGamma => rng.random_range(0.5..1.5),
            _ => rng.random_range(-0.5..0.5),
        });
        p.value = std::sync::Arc::new(value);
    }
}

/// Image extent fed to the composite checks; the smallest the discriminator
/// accepts.
pub const NETWORK_INPUT_EXTENT: usize = 32;

/// Coordinates sampled per input tensor in the composite checks.
pub const NETWORK_COORDS_PER_INPUT: usize = 24;

/// Checks a generator-discriminator composite by name (see
/// [`NETWORK_NAMES`]).
pub fn check_network(name: &str, seed: u64) -> Result<CheckResult> {
    let kind = match name {
        "full_generator" => Composite::FullGenerator,
        "discriminator" => Composite::Discriminator,
        other => {
            return Err(Error::contract(format!(
                "unknown network check {other:?}; expected one of {}",
                NETWORK_NAMES.join(", ")
            )))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Generator::<f64>::new(GeneratorConfig {
        channels: 1,
        width: 2,
        modules: 1,
        tail: TailConfig::Penultimate { channels: 2 },
    })?;
    let mut d = Discriminator::<f64>::new(DiscriminatorConfig { base_width: 2, ..Default::default() })?;
    randomize(&mut g, &mut rng);
    randomize(&mut d, &mut rng);
    let n = NETWORK_INPUT_EXTENT;
    let image = |s: u64| away_from_zero::<f64>(&[2, 1, n, n], s);
    let mut inputs: Vec<Tensor<f64>> = match kind {
        Composite::FullGenerator => vec![image(seed.wrapping_add(1))],
        Composite::Discriminator => vec![image(seed.wrapping_add(1)), image(seed.wrapping_add(2))],
    };
    // Generator parameters are constants when only the discriminator is
    // under test.
    let g_fixed = kind == Composite::Discriminator;
    let fixed = cancelled_by_norm(&g).into_iter().map(|c| c || g_fixed).chain(cancelled_by_norm(&d));
    let all = g.params().iter().chain(d.params());
    let mut frozen = Vec::new();
    for (p, fixed) in all.zip(fixed) {
        if fixed {
            frozen.push(Some((*p.value).clone()));
        } else {
            frozen.push(None);
            inputs.push((*p.value).clone());
        }
    }
    let mut case = NetworkCase { kind, g, d, frozen };
    let coords = Some(NETWORK_COORDS_PER_INPUT);
    let inputs32: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
    let f32 = gradcheck_mixed(&mut case, &inputs32, F64_STEP, coords)?;
    let f64 = crate::autodiff::gradcheck_many(|t, v| case.eval(t, v), &inputs, F64_STEP, coords)?;
    Ok(CheckResult { name: name.to_string(), f32, f64 })
}

/// Every op and composite check.
pub fn check_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for name in OP_NAMES {
        out.push(check_op(name, seed)?);
    }
    for name in NETWORK_NAMES {
        out.push(check_network(name, seed)?);
    }
    Ok(out)
}
