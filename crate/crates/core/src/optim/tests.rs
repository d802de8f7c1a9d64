use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{Generator, GeneratorConfig, Network, TailConfig};
use crate::tensor::Tensor;

/// A store with one conv layer (weight 1x1x3x3 + bias) used as a bag of
/// 10 free scalars.
fn bag<T: Real>(init: &[f64]) -> ParamStore<T> {
    let mut s = ParamStore::default();
    s.conv("w", 1, 1, 3, 1, 1);
    s.params_mut()[0].value = Arc::new(Tensor::from_fn([1, 1, 3, 3], |i| T::from_f64(init[i])));
    s.params_mut()[1].value = Arc::new(Tensor::full([1], T::from_f64(init[9])));
    s
}

fn values<T: Real>(s: &ParamStore<T>) -> Vec<f64> {
    s.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.as_f64())).collect()
}

fn set_grads<T: Real>(s: &mut ParamStore<T>, g: &[f64]) {
    let (w, b) = g.split_at(9);
    s.params_mut()[0].grad = Some(w.iter().map(|&x| T::from_f64(x)).collect());
    s.params_mut()[1].grad = Some(b.iter().map(|&x| T::from_f64(x)).collect());
}

#[test]
fn zero_gradient_leaves_parameters() {
    let init: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
    let mut s = bag::<f32>(&init);
    let mut adam = AdamState::new(&s, AdamConfig::default());
    set_grads(&mut s, &[0.0; 10]);
    adam.step(&mut s, 2e-4).unwrap();
    assert_eq!(values(&s), values(&bag::<f32>(&init)));
    assert_eq!(adam.t, 1);
}

#[test]
fn first_step_moves_by_lr() {
    let mut s = bag::<f64>(&[0.0; 10]);
    let mut adam = AdamState::new(&s, AdamConfig::default());
    set_grads(&mut s, &[1.0; 10]);
    adam.step(&mut s, 2e-4).unwrap();
    // m_hat = 1, v_hat = 1: step = lr / (1 + eps).
    let expected = -2e-4 / (1.0 + 1e-8);
    for v in values(&s) {
        assert!((v - expected).abs() < 1e-15, "{v}");
    }
    assert!(s.params().iter().all(|p| p.grad.is_none()));
}

#[test]
fn non_finite_gradient_names_parameter_and_changes_nothing() {
    let mut s = bag::<f32>(&[0.5; 10]);
    let mut adam = AdamState::new(&s, AdamConfig::default());
    let mut g = [0.1; 10];
    g[9] = f64::NAN;
    set_grads(&mut s, &g);
    match adam.step(&mut s, 2e-4) {
        Err(Error::Numeric { what, .. }) => assert_eq!(what, "w.bias"),
        other => panic!("{other:?}"),
    }
    assert_eq!(adam.t, 0);
    assert_eq!(values(&s), vec![0.5; 10]);
    assert!(adam.step(&mut bag(&[0.0; 10]), -1.0).is_err());
}

#[test]
fn identical_optimizers_stay_bit_identical() {
    let cfg = GeneratorConfig { channels: 1, width: 2, modules: 1, tail: TailConfig::Direct };
    let mut a = Generator::<f32>::new(cfg).unwrap();
    a.init_params(3);
    let mut b = a.clone();
    let mut sa = AdamState::new(a.store(), AdamConfig::default());
    let mut sb = AdamState::new(b.store(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let grads: Vec<Vec<f32>> =
            a.params().iter().map(|p| (0..p.value.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for (net, st) in [(&mut a, &mut sa), (&mut b, &mut sb)] {
            for (p, g) in net.store_mut().params_mut().iter_mut().zip(&grads) {
                p.grad = Some(g.clone());
            }
            st.step(net.store_mut(), 2e-4).unwrap();
        }
    }
    for (pa, pb) in a.params().iter().zip(b.params()) {
        assert!(pa.value.data().iter().zip(pb.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(sa, sb);
}

#[test]
fn adam_with_schedule_solves_a_quadratic() {
    // f(w) = |w - w*|^2, with the schedule compressed to one step per "epoch".
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target: Vec<f64> = (0..10).map(|_| rng.random_range(-0.1..0.1)).collect();
    let mut s = bag::<f64>(&[0.0; 10]);
    let f = |s: &ParamStore<f64>| values(s).iter().zip(&target).map(|(w, t)| (w - t).powi(2)).sum::<f64>();
    let f0 = f(&s);
    let sched = LrSchedule { base_lr: 2e-4, constant_epochs: 1250, total_epochs: 2000 };
    let mut adam = AdamState::new(&s, AdamConfig::default());
    for step in 0..2000 {
        let g: Vec<f64> = values(&s).iter().zip(&target).map(|(w, t)| 2.0 * (w - t)).collect();
        set_grads(&mut s, &g);
        let before = values(&s);
        let lr = sched.lr_at(step).unwrap();
        adam.step(&mut s, lr).unwrap();
        if step >= 10 {
            for (x, y) in before.iter().zip(values(&s)) {
                assert!((x - y).abs() <= 10.0 * lr + 1e-18, "step {step}");
            }
        }
    }
    assert!(f(&s) < 1e-4 * f0, "f {} f0 {f0}", f(&s));
}

#[test]
fn schedule_examples() {
    let s = LrSchedule::default();
    assert_eq!(s.lr_at(0).unwrap(), 2e-4);
    assert_eq!(s.lr_at(99).unwrap(), 2e-4);
    assert!((s.lr_at(130).unwrap() - 1e-4).abs() < 1e-18);
    assert_eq!(s.lr_at(160).unwrap(), 0.0);
    assert!(matches!(s.lr_at(161), Err(Error::Contract(_))));
    assert!(LrSchedule { constant_epochs: 200, ..s }.lr_at(0).is_err());
    assert!(LrSchedule { base_lr: 0.0, ..s }.validate().is_err());
    assert_eq!(LrSchedule { constant_epochs: 160, ..s }.lr_at(160).unwrap(), 0.0);
}

#[test]
fn schedule_sum_matches_closed_form() {
    let s = LrSchedule::default();
    // 100 constant epochs plus the ramp 60/60, 59/60, ..., 0/60.
    let closed = s.base_lr * (100.0 + 61.0 / 2.0);
    let sum: f64 = (0..=160).map(|e| s.lr_at(e).unwrap()).sum();
    assert!((sum - closed).abs() < 1e-9);
}

proptest! {
    #[test]
    fn schedule_is_non_increasing(c in 0u64..50, extra in 1u64..50, base in 1e-6f64..1e-2) {
        let s = LrSchedule { base_lr: base, constant_epochs: c, total_epochs: c + extra };
        let lrs: Vec<f64> = (0..=s.total_epochs).map(|e| s.lr_at(e).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*lrs.last().unwrap(), 0.0);
        // Second differences vanish inside each linear piece.
        for e in (c + 1)..s.total_epochs {
            let e = e as usize;
            prop_assert!((lrs[e - 1] - 2.0 * lrs[e] + lrs[e + 1]).abs() < 1e-15);
        }
    }

    #[test]
    fn second_moment_stays_nonnegative(grads in prop::collection::vec(prop::array::uniform10(-5.0f64..5.0), 1..20)) {
        let mut s = bag::<f32>(&[0.0; 10]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        for (i, g) in grads.iter().enumerate() {
            set_grads(&mut s, g);
            adam.step(&mut s, 1e-3).unwrap();
            prop_assert_eq!(adam.t, i as u64 + 1);
            prop_assert!(adam.v.iter().flatten().all(|&v| v >= 0.0));
        }
    }
}
