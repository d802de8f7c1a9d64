use super::*;
use crate::nn::{DiscriminatorConfig, GeneratorConfig, TailConfig};

fn small_state() -> TrainState {
    let cfg = TrainConfig {
        generator: GeneratorConfig { channels: 1, width: 2, modules: 1, tail: TailConfig::Direct },
        discriminator: DiscriminatorConfig { base_width: 2, ..Default::default() },
        patch: 24,
        ..TrainConfig::toy()
    };
    let mut st = TrainState::new(cfg).unwrap();
    st.epoch = 3;
    st.iteration = 150;
    for (i, a) in st.adam.iter_mut().enumerate() {
        a.t = 150 + i as u64;
        a.m.iter_mut().flatten().enumerate().for_each(|(j, v)| *v = j as f32 * 0.5);
        a.v.iter_mut().flatten().enumerate().for_each(|(j, v)| *v = j as f32 * 0.25);
    }
    use rand::Rng;
    let _: u64 = st.rng.random();
    st
}

#[test]
fn round_trip_restores_everything() {
    let st = small_state();
    let ck = Checkpoint::from_state(&st);
    let bytes = ck.to_bytes();
    assert!(bytes.starts_with(b"CKPT1\nconfig "));
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let restored = back.into_state().unwrap();
    assert_eq!((restored.epoch, restored.iteration), (3, 150));
    assert_eq!(restored.adam, st.adam);
    assert_eq!(restored.rng, st.rng);
    for (a, b) in restored.d_b.params().iter().zip(st.d_b.params()) {
        assert_eq!(a.value, b.value);
    }
    assert_eq!(restored.g_ba.store().norm_stats(), st.g_ba.store().norm_stats());
}

#[test]
fn generator_extraction() {
    let st = small_state();
    let ck = Checkpoint::from_state(&st);
    let g = ck.generator(NetworkKey::GenAB).unwrap();
    for (a, b) in g.params().iter().zip(st.g_ab.params()) {
        assert_eq!(a.value, b.value);
    }
    assert!(ck.generator(NetworkKey::DiscA).is_err());
}

#[test]
fn shape_and_presence_are_validated() {
    let st = small_state();
    let mut ck = Checkpoint::from_state(&st);
    ck.entries[0].tensor = Tensor::zeros([1]);
    assert!(matches!(ck.into_state(), Err(Error::Load(_))));
    let mut ck = Checkpoint::from_state(&st);
    ck.entries.pop();
    assert!(matches!(ck.into_state(), Err(Error::Load(_))));
    let mut ck = Checkpoint::from_state(&st);
    let extra = ck.entries[0].clone();
    ck.entries.push(Entry { name: "ghost".into(), ..extra });
    assert!(matches!(ck.into_state(), Err(Error::Load(_))));
    // A checkpoint for different widths does not fit.
    let mut ck = Checkpoint::from_state(&st);
    ck.config.generator.width = 3;
    assert!(matches!(ck.generator(NetworkKey::GenAB), Err(Error::Load(_))));
}

#[test]
fn malformed_bytes_are_format_errors() {
    let bytes = Checkpoint::from_state(&small_state()).to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::Format(_))));
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let swapped = text.replacen("tensor G_AB param", "tensor G_XY param", 1);
    assert!(Checkpoint::from_bytes(swapped.as_bytes()).is_err());
    assert!(Checkpoint::from_bytes(b"CKPT1\nconfig 99999999\n").is_err());
}

#[test]
fn save_is_atomic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    let ck = Checkpoint::from_state(&small_state());
    ck.save(&path).unwrap();
    assert!(!dir.path().join("x.ckpt.tmp").exists());
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}
