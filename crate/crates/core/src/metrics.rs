//! Region-of-interest noise and SNR statistics plus ground-truth errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset added to pixel values before taking an SNR so that means are
/// positive on an HU-like scale.
pub const SNR_OFFSET: f64 = 1000.0;

/// Axis-aligned rectangle in pixel coordinates: columns `x..x+w`, rows
/// `y..y+h`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub label: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

pub const MIN_ROI_PIXELS: usize = 16;

impl Roi {
    pub fn new(label: impl Into<String>, x: usize, y: usize, w: usize, h: usize) -> Self {
        Roi { label: label.into(), x, y, w, h }
    }

    /// Checks the area bound and containment in a `height x width` image.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.w * self.h < MIN_ROI_PIXELS {
            return Err(Error::contract(format!(
                "ROI {} covers {} pixels, need at least {MIN_ROI_PIXELS}",
                self.label,
                self.w * self.h
            )));
        }
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::contract(format!(
                "ROI {} ({},{} {}x{}) leaves the {height}x{width} image",
                self.label, self.x, self.y, self.w, self.h
            )));
        }
        Ok(())
    }

    /// Pixel values inside the ROI, row by row.
    pub fn pixels(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        let (h, w) = plane(image)?;
        self.validate(h, w)?;
        let d = image.data();
        Ok((self.y..self.y + self.h)
            .flat_map(|r| d[r * w + self.x..r * w + self.x + self.w].iter().map(|&v| v as f64))
            .collect())
    }
}

/// `(H, W)` of a single-image tensor of shape `[H,W]`, `[1,H,W]` or
/// `[1,1,H,W]`.
pub fn plane<T: crate::real::Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let s = image.shape();
    let lead: usize = s.iter().rev().skip(2).product();
    if s.len() < 2 || s.len() > 4 || lead != 1 {
        return Err(Error::dim(format!("expected a single 2-D image, got shape {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation of `v` around its mean.
fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn roi_noise_std(image: &Tensor<f32>, roi: &Roi) -> Result<f64> {
    Ok(population_std(&roi.pixels(image)?))
}

/// Signal-to-noise ratio; `Undefined` when the region is constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Snr {
    Value(f64),
    Undefined,
}

impl Snr {
    pub fn value(self) -> Option<f64> {
        match self {
            Snr::Value(v) => Some(v),
            Snr::Undefined => None,
        }
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Value(v) => write!(f, "{v}"),
            Snr::Undefined => f.write_str("undefined"),
        }
    }
}

/// `mean / std` of raw region values.
pub fn snr_of(values: &[f64]) -> Snr {
    let s = population_std(values);
    if s == 0.0 {
        Snr::Undefined
    } else {
        Snr::Value(mean(values) / s)
    }
}

/// SNR of the ROI after shifting pixel values by [`SNR_OFFSET`].
pub fn roi_snr(image: &Tensor<f32>, roi: &Roi) -> Result<Snr> {
    let v: Vec<f64> = roi.pixels(image)?.into_iter().map(|x| x + SNR_OFFSET).collect();
    Ok(snr_of(&v))
}

pub fn rmse_to_clean(result: &Tensor<f32>, clean: &Tensor<f32>) -> Result<f64> {
    if result.shape() != clean.shape() {
        return Err(Error::dim(format!(
            "result shape {:?} does not match clean shape {:?}",
            result.shape(),
            clean.shape()
        )));
    }
    if result.numel() == 0 {
        return Err(Error::contract("RMSE of empty images"));
    }
    let sq: f64 = result.data().iter().zip(clean.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok((sq / result.numel() as f64).sqrt())
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub file: String,
    /// Mean over the image's ROIs.
    pub input_std: f64,
    pub output_std: f64,
    pub input_snr: Snr,
    pub output_snr: Snr,
    pub input_rmse: Option<f64>,
    pub output_rmse: Option<f64>,
}

impl ImageMetrics {
    /// Measures `input` against `output` (and optionally the clean image)
    /// over `rois`. Std and SNR are averaged over the ROIs; SNR is undefined
    /// if any ROI is constant.
    pub fn measure(
        file: impl Into<String>,
        input: &Tensor<f32>,
        output: &Tensor<f32>,
        clean: Option<&Tensor<f32>>,
        rois: &[Roi],
    ) -> Result<Self> {
        if rois.is_empty() {
            return Err(Error::contract("no ROIs to measure"));
        }
        let stats = |img: &Tensor<f32>| -> Result<(f64, Snr)> {
            let mut stds = Vec::with_capacity(rois.len());
            let mut snrs = Vec::with_capacity(rois.len());
            for r in rois {
                stds.push(roi_noise_std(img, r)?);
                snrs.push(roi_snr(img, r)?.value());
            }
            let snr =
                snrs.iter().copied().collect::<Option<Vec<f64>>>().map_or(Snr::Undefined, |s| Snr::Value(mean(&s)));
            Ok((mean(&stds), snr))
        };
        let (input_std, input_snr) = stats(input)?;
        let (output_std, output_snr) = stats(output)?;
        let (input_rmse, output_rmse) = match clean {
            Some(c) => (Some(rmse_to_clean(input, c)?), Some(rmse_to_clean(output, c)?)),
            None => (None, None),
        };
        Ok(ImageMetrics { file: file.into(), input_std, output_std, input_snr, output_snr, input_rmse, output_rmse })
    }

    fn columns(&self) -> [Option<f64>; 6] {
        [
            Some(self.input_std),
            Some(self.output_std),
            self.input_snr.value(),
            self.output_snr.value(),
            self.input_rmse,
            self.output_rmse,
        ]
    }
}

pub const METRIC_COLUMNS: [&str; 6] =
    ["input_std", "output_std", "input_snr", "output_snr", "input_rmse", "output_rmse"];

/// Mean and population std of one column over the images where it is
/// defined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn aggregates(&self) -> [Option<Aggregate>; 6] {
        std::array::from_fn(|c| {
            let v: Vec<f64> = self.rows.iter().filter_map(|r| r.columns()[c]).collect();
            (!v.is_empty()).then(|| Aggregate { mean: mean(&v), std: population_std(&v), count: v.len() })
        })
    }

    /// CSV with a comment header, one row per image, then `mean` and `std`
    /// rows. Undefined cells are written as `undefined`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# snr_offset={SNR_OFFSET}\nfile,{}\n", METRIC_COLUMNS.join(","));
        let cell = |v: Option<f64>| v.map_or("undefined".to_string(), |x| x.to_string());
        for r in &self.rows {
            out.push_str(&r.file);
            for c in r.columns() {
                out.push(',');
                out.push_str(&cell(c));
            }
            out.push('\n');
        }
        let aggs = self.aggregates();
        for (name, pick) in [("mean", 0), ("std", 1)] {
            out.push_str(name);
            for a in &aggs {
                out.push(',');
                out.push_str(&cell(a.map(|a| if pick == 0 { a.mean } else { a.std })));
            }
            out.push('\n');
        }
        out
    }
}

/// Parses a report written by [`MetricReport::to_csv`], returning the
/// per-image rows; the trailing `mean` and `std` rows are checked for shape
/// but not returned, since they are recomputable.
pub fn parse_metric_csv(text: &str) -> Result<MetricReport> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = format!("file,{}", METRIC_COLUMNS.join(","));
    match lines.next() {
        Some(h) if h.trim_end() == header => {}
        other => return Err(Error::format(format!("metric CSV header mismatch: {other:?}"))),
    }
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(Error::format(format!("metric row has {} fields, expected 7", f.len())));
        }
        let cell = |s: &str| -> Result<Option<f64>> {
            if s == "undefined" {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| Error::format(format!("metric row: bad value {s:?}")))
        };
        let c: Vec<Option<f64>> = f[1..].iter().map(|s| cell(s)).collect::<Result<_>>()?;
        if matches!(f[0], "mean" | "std") {
            continue;
        }
        let required = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| Error::format(format!("metric row {}: {what} is undefined", f[0])))
        };
        let snr = |v: Option<f64>| v.map_or(Snr::Undefined, Snr::Value);
        rows.push(ImageMetrics {
            file: f[0].to_string(),
            input_std: required(c[0], "input_std")?,
            output_std: required(c[1], "output_std")?,
            input_snr: snr(c[2]),
            output_snr: snr(c[3]),
            input_rmse: c[4],
            output_rmse: c[5],
        });
    }
    Ok(MetricReport { rows })
}
