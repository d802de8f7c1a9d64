use super::*;
use crate::gradcheck_suite::{away_from_zero, OpCase, OP_NAMES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.random_range(-1.0..1.0)))
}

#[test]
fn conv2d_hand_countable_overlap() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), [1, 1, 3, 3]);
    assert_eq!(out.data()[4], 9.0);
    assert_eq!(out.data()[0], 4.0);
}

#[test]
fn conv2d_stride_two_extent() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 1, 56, 56]));
    let w = tape.constant(Tensor::zeros([1, 1, 4, 4]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), [1, 1, 28, 28]);
}

#[test]
fn conv2d_weight_gradient_matches_finite_differences() {
    let x = random::<f32>(&[2, 3, 8, 8], 1);
    let w = random::<f32>(&[4, 3, 3, 3], 2);
    let xs = x.clone();
    let rep = gradcheck(
        move |tape, w| {
            let x = tape.constant(xs.clone());
            let y = tape.conv2d(x, w, None, 1, 1)?;
            Ok(tape.sum_all(y))
        },
        &w,
        1e-2,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn conv2d_all_inputs_gradcheck_strided() {
    let inputs = vec![random::<f64>(&[2, 2, 7, 6], 3), random::<f64>(&[3, 2, 4, 4], 4), random::<f64>(&[3], 5)];
    let proj = random::<f64>(&[2, 3, 3, 3], 6);
    let rep = gradcheck_many(
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let c = tape.constant(proj.clone());
            let d = tape.sub(y, c)?;
            let s = tape.square(d);
            tape.mean_all(s)
        },
        &inputs,
        1e-6,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

fn bn_loss<T: Real>(tape: &mut Tape<T>, v: &[Var], target: &Tensor<T>, mode: NormMode) -> Result<Var> {
    let c = tape.value(v[1]).numel();
    let mut rm = Tensor::full([c], T::from_f64(0.1));
    let mut rv = Tensor::full([c], T::from_f64(0.7));
    let y = tape.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, mode, BatchNormConfig::default())?;
    let t = tape.constant(target.clone());
    let d = tape.sub(y, t)?;
    let s = tape.square(d);
    tape.mean_all(s)
}

#[test]
fn batch_norm_constant_input_gives_beta() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full([2, 2, 3, 3], 4.5));
    let g = tape.constant(Tensor::new([2], vec![1.5, -2.0]).unwrap());
    let b = tape.constant(Tensor::new([2], vec![0.25, -0.75]).unwrap());
    let mut rm = Tensor::zeros([2]);
    let mut rv = Tensor::full([2], 1.0);
    let y = tape.batch_norm(x, g, b, &mut rm, &mut rv, NormMode::Train, BatchNormConfig::default()).unwrap();
    let out = tape.value(y);
    for n in 0..2 {
        for c in 0..2 {
            for k in 0..9 {
                let want = [0.25, -0.75][c];
                assert_eq!(out.data()[(n * 2 + c) * 9 + k], want);
            }
        }
    }
    // momentum 0.9: running mean moves 10% toward the batch mean.
    assert!((rm.data()[0] - 0.45).abs() < 1e-6);
    assert!((rv.data()[0] - 0.9).abs() < 1e-6);
}

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(random(&[4, 3, 5, 5], 7).map(|v| 3.0 * v + 2.0));
    let g = tape.constant(Tensor::full([3], 1.0));
    let b = tape.constant(Tensor::zeros([3]));
    let (mut rm, mut rv) = (Tensor::zeros([3]), Tensor::full([3], 1.0));
    let y = tape.batch_norm(x, g, b, &mut rm, &mut rv, NormMode::Train, BatchNormConfig::default()).unwrap();
    let out = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> =
            (0..4).flat_map(|n| out[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].iter().map(|&v| v as f64)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

struct BnCase {
    target: Tensor<f32>,
    mode: NormMode,
}

impl ScalarFn for BnCase {
    fn eval<T: Real>(&mut self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        bn_loss(tape, v, &self.target.cast(), self.mode)
    }
}

#[test]
fn batch_norm_gradcheck_both_modes() {
    for mode in [NormMode::Train, NormMode::Eval] {
        let inputs = vec![random::<f32>(&[3, 2, 4, 4], 8), away_from_zero::<f32>(&[2], 9), random::<f32>(&[2], 10)];
        let mut case = BnCase { target: random::<f32>(&[3, 2, 4, 4], 11), mode };
        let rep = gradcheck_mixed(&mut case, &inputs, 1e-4, None).unwrap();
        assert!(rep.max_rel_error < 1e-3, "{mode:?} f32: {rep:?}");
        let inputs64: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
        let target = case.target.cast();
        let rep = gradcheck_many(|t, v| bn_loss(t, v, &target, mode), &inputs64, 1e-5, None).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{mode:?} f64: {rep:?}");
    }
}

#[test]
fn batch_norm_rejects_channel_mismatch_and_bad_epsilon() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 3, 2, 2]));
    let g = tape.constant(Tensor::zeros([2]));
    let b = tape.constant(Tensor::zeros([2]));
    let (mut rm, mut rv) = (Tensor::zeros([2]), Tensor::zeros([2]));
    let err = tape.batch_norm(x, g, b, &mut rm, &mut rv, NormMode::Train, BatchNormConfig::default());
    assert!(matches!(err, Err(Error::Dimension(_))));
    let g3 = tape.constant(Tensor::zeros([3]));
    let (mut rm, mut rv) = (Tensor::zeros([3]), Tensor::zeros([3]));
    let cfg = BatchNormConfig { momentum: 0.9, epsilon: 0.0 };
    assert!(matches!(tape.batch_norm(x, g3, g3, &mut rm, &mut rv, NormMode::Eval, cfg), Err(Error::Contract(_))));
}

#[test]
fn relu_and_leaky_relu_values() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), [0.0, 0.0, 2.0]);
    let x = tape.constant(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
    let y = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(y).data(), [-0.2, 2.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros([2]), true);
    let y = tape.relu(x);
    let s = tape.sum_all(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), [0.0, 0.0]);
}

#[test]
fn activations_gradcheck_away_from_kinks() {
    let x = away_from_zero::<f32>(&[2, 3, 4, 4], 12);
    for name in ["relu", "leaky_relu"] {
        let rep = gradcheck_mixed(&mut OpCase::new(name).unwrap(), std::slice::from_ref(&x), 1e-4, None).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{name}: {rep:?}");
    }
}

#[test]
fn concat_seven_module_tensors_gives_896_channels() {
    let mut tape = Tape::<f32>::new();
    let parts: Vec<Var> = (0..7).map(|i| tape.constant(Tensor::full([1, 128, 8, 8], i as f32))).collect();
    let y = tape.concat(&parts, 1).unwrap();
    let v = tape.value(y);
    assert_eq!(v.shape(), [1, 896, 8, 8]);
    assert_eq!(v.data()[3 * 128 * 64], 3.0);
}

#[test]
fn concat_single_is_identity_and_rejects_mismatch() {
    let mut tape = Tape::<f32>::new();
    let t = random::<f32>(&[2, 3, 4], 13);
    let a = tape.constant(t.clone());
    let y = tape.concat(&[a], 1).unwrap();
    assert_eq!(tape.value(y), &t);
    let b = tape.constant(Tensor::zeros([2, 3, 5]));
    assert!(matches!(tape.concat(&[a, b], 1), Err(Error::Dimension(_))));
}

#[test]
fn concat_gradient_routes_slices_to_sources() {
    for axis in 0..3 {
        let mut shapes = vec![vec![2, 3, 4]; 3];
        shapes[1][axis] = 1;
        shapes[2][axis] = 2;
        let inputs: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(i, s)| random(s, 20 + i as u64)).collect();
        let mut out_shape = vec![2, 3, 4];
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let w = random::<f64>(&out_shape, 30);
        let rep = gradcheck_many(
            |t, v| {
                let y = t.concat(v, axis)?;
                let c = t.constant(w.clone());
                let d = t.sub(y, c)?;
                let s = t.square(d);
                Ok(t.sum_all(s))
            },
            &inputs,
            1e-6,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "axis {axis}: {rep:?}");
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let m = tape.mean_all(x).unwrap();
    assert_eq!(tape.item(m), 2.5);

    let a = tape.leaf(Tensor::scalar(-3.0), true);
    let y = tape.abs_val(a);
    assert_eq!(tape.item(y), 3.0);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(a).unwrap(), [-1.0]);
}

#[test]
fn elementwise_shape_mismatch() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2]));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
    assert!(matches!(tape.sub(a, b), Err(Error::Dimension(_))));
    let e = tape.constant(Tensor::new([0], vec![]).unwrap());
    assert!(matches!(tape.mean_all(e), Err(Error::Contract(_))));
}

#[test]
fn mean_abs_difference_gradcheck() {
    let inputs = vec![random::<f32>(&[3, 5], 40), random::<f32>(&[3, 5], 41)];
    let rep = gradcheck_many(
        |t, v| {
            let d = t.sub(v[0], v[1])?;
            let a = t.abs_val(d);
            t.mean_all(a)
        },
        &inputs,
        1e-3,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let m = tape.mean_all(x).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x).unwrap(), [0.25; 4]);

    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new([2], vec![1.0, -2.0]).unwrap(), true);
    let s = tape.square(x);
    let l = tape.sum_all(s);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), [2.0, -4.0]);

    // Repeated calls accumulate until zero_grad.
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), [4.0, -8.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros([2]), true);
    let y = tape.square(x);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn no_gradient_leaks_into_constants_or_detached_values() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
    let c = tape.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
    let y = tape.add(x, c).unwrap();
    let yd = tape.detach(y);
    let z = tape.add(y, yd).unwrap();
    let l = tape.sum_all(z);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), [1.0, 1.0]);
    assert!(tape.grad(c).is_none());
    assert!(tape.grad(yd).is_none());
    assert!(!tape.requires_grad(yd));
}

#[test]
fn gradcheck_linear_function_is_exact() {
    let x = random::<f32>(&[3, 4], 50);
    let rep = gradcheck(|t, v| t.mean_all(v), &x, 1e-2).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn gradcheck_catches_a_sign_flipped_backward_rule() {
    let x = away_from_zero::<f32>(&[10], 51);
    let rep = gradcheck(
        |t, v| {
            let y = t.custom_unary(v, |a| a * a, |a| -2.0 * a);
            t.mean_all(y)
        },
        &x,
        1e-2,
    )
    .unwrap();
    assert!(rep.max_rel_error > 0.1, "{rep:?}");
}

#[test]
fn gradcheck_reports_non_finite_coordinates() {
    let x = Tensor::<f32>::new([2], vec![1.0, 0.0]).unwrap();
    let err = gradcheck(
        |t, v| {
            let y = t.custom_unary(v, |a| a.ln(), |a| 1.0 / a);
            Ok(t.sum_all(y))
        },
        &x,
        1e-3,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
}

#[test]
fn softplus_pad_and_crop_gradcheck() {
    let x = random::<f64>(&[2, 2, 5, 4], 60);
    let rep = gradcheck(
        |t, v| {
            let p = t.reflect_pad(v, 3, 2)?;
            let c = t.crop(p, 1, 2, 6, 4)?;
            let s = t.softplus(c);
            let q = t.square(s);
            t.mean_all(q)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn reflect_pad_mirrors_without_repeating_edge() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.reflect_pad(x, 0, 2).unwrap();
    assert_eq!(tape.value(y).data(), [1.0, 2.0, 3.0, 2.0, 1.0]);
}

#[test]
fn softplus_is_stable_for_large_inputs() {
    assert_eq!(softplus(1000.0f32), 1000.0);
    assert!(softplus(-1000.0f32) >= 0.0);
    assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn every_differentiable_op_passes_twenty_random_f32_gradchecks() {
    for name in OP_NAMES {
        for seed in 0..20 {
            let x = away_from_zero::<f32>(&[2, 2, 4, 4], 100 + seed);
            let rep = gradcheck_mixed(&mut OpCase::new(name).unwrap(), std::slice::from_ref(&x), 1e-4, None).unwrap();
            assert!(rep.max_rel_error < 1e-3, "{name} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn every_differentiable_op_passes_f64_gradcheck() {
    for name in OP_NAMES {
        let x = away_from_zero::<f64>(&[2, 2, 4, 4], 200);
        let rep =
            gradcheck_many(|t, v| OpCase::new(name).unwrap().eval(t, v), std::slice::from_ref(&x), 1e-6, None).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{name}: {rep:?}");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random(&[2, 3, 9, 9], 70));
        let w = tape.constant(random(&[4, 3, 3, 3], 71));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_algebra(h in 1usize..40, k in 1usize..6, s in 1usize..4, p in 0usize..3) {
        prop_assume!(h + 2 * p >= k);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, h, h + 1]));
        let w = tape.constant(Tensor::zeros([1, 1, k, k]));
        let y = tape.conv2d(x, w, None, s, p).unwrap();
        let want_h = (h + 2 * p - k) / s + 1;
        let want_w = (h + 1 + 2 * p - k) / s + 1;
        prop_assert_eq!(tape.value(y).shape(), &[1, 1, want_h, want_w]);
    }

    #[test]
    fn backward_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
        let x0 = random::<f64>(&[6], seed);
        let grad_of = |a: f64, b: f64| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(x0.clone(), true);
            let f = t.square(x);
            let f = t.mean_all(f).unwrap();
            let g = t.softplus(x);
            let g = t.sum_all(g);
            let fa = t.mul_scalar(f, a);
            let gb = t.mul_scalar(g, b);
            let l = t.add(fa, gb).unwrap();
            t.backward(l).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        let combined = grad_of(alpha, beta);
        let (gf, gg) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0));
        for i in 0..6 {
            prop_assert!((combined[i] - (alpha * gf[i] + beta * gg[i])).abs() < 1e-5);
        }
    }
}
