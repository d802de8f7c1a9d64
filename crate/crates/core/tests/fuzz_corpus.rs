//! Replays the checked-in fuzz corpus through every parser on the stable
//! toolchain. Seeds named `truncated*` must be rejected; all others must
//! parse, so the corpus stays in step with the formats.

use std::fs;
use std::path::PathBuf;

use ctcycle::checkpoint::Checkpoint;
use ctcycle::losses::parse_loss_csv;
use ctcycle::metrics::parse_metric_csv;
use ctcycle::phantom::{parse_manifest, RoiFile};
use ctcycle::train::TrainConfig;
use ctcycle::{Result, Tensor};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn replay<T>(target: &str, parse: impl Fn(&[u8]) -> Result<T>) {
    for (name, bytes) in seeds(target) {
        let result = parse(&bytes);
        if name.starts_with("truncated") || name.contains("_not_") {
            assert!(result.is_err(), "{target}/{name} should be rejected");
        } else if let Err(e) = result {
            panic!("{target}/{name}: {e}");
        }
    }
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).expect("text seed")
}

#[test]
fn tsr1_seeds() {
    replay("tsr1", Tensor::<f32>::from_tsr1_bytes);
}

#[test]
fn ckpt1_seeds() {
    replay("ckpt1", |b| Checkpoint::from_bytes(b)?.into_state());
}

#[test]
fn manifest_seeds() {
    replay("manifest", |b| parse_manifest(text(b)));
}

#[test]
fn roi_seeds() {
    replay("rois", |b| RoiFile::parse(text(b)));
}

#[test]
fn loss_csv_seeds() {
    replay("loss_csv", |b| parse_loss_csv(text(b)));
}

#[test]
fn metric_csv_seeds() {
    replay("metric_csv", |b| parse_metric_csv(text(b)));
}

#[test]
fn train_config_seeds() {
    replay("train_config", |b| TrainConfig::parse_toml(text(b)));
}
