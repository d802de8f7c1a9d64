//! Dataset evaluation: denoise every listed image with `G_AB` and measure
//! flat-region noise, SNR and, where a clean image exists, RMSE.

use std::path::Path;
use std::thread;

use crate::error::{Error, Result};
use crate::metrics::{ImageMetrics, MetricReport, Roi};
use crate::nn::Generator;
use crate::phantom::{clean_image_path, dataset_manifest, RoiFile};
use crate::tensor::Tensor;
use crate::train::denoise_image;

/// One image to evaluate.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub file: String,
    pub input: Tensor<f32>,
    pub clean: Option<Tensor<f32>>,
    pub rois: Vec<Roi>,
}

/// Every manifest image in both domains, in manifest order, with ROIs from
/// `rois` and the clean counterpart when the dataset has one.
pub fn load_eval_items(dir: &Path, rois: &RoiFile) -> Result<Vec<EvalItem>> {
    dataset_manifest(dir)?
        .into_iter()
        .map(|entry| {
            let input = Tensor::load(dir.join(&entry.file))?;
            let clean_path = clean_image_path(dir, &entry.file);
            let clean = if clean_path.exists() { Some(Tensor::load(&clean_path)?) } else { None };
            let rois = rois
                .rois_for(&entry.file)
                .ok_or_else(|| Error::format(format!("ROI file has no entry for {}", entry.file)))?
                .to_vec();
            Ok(EvalItem { file: entry.file, input, clean, rois })
        })
        .collect()
}

/// Denoises and measures every item. Images are split across the available
/// cores, each worker with its own copy of the generator; rows come back in
/// item order regardless of scheduling.
pub fn evaluate(g_ab: &Generator, items: &[EvalItem]) -> Result<MetricReport> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len()).max(1);
    let chunk = items.len().div_ceil(workers).max(1);
    let rows: Result<Vec<Vec<ImageMetrics>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let mut g = g_ab.clone();
                s.spawn(move || part.iter().map(|item| evaluate_one(&mut g, item)).collect::<Result<Vec<_>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    Ok(MetricReport { rows: rows?.into_iter().flatten().collect() })
}

fn evaluate_one(g: &mut Generator, item: &EvalItem) -> Result<ImageMetrics> {
    let output = denoise_image(g, &item.input)?;
    ImageMetrics::measure(&item.file, &item.input, &output, item.clean.as_ref(), &item.rois)
}
