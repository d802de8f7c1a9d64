//! Synthetic two-domain data: deformable elliptical chest phantoms rendered
//! at two cardiac phases, with dose-dependent image noise.
//!
//! Intensities are on an HU-like scale with air at -1000. Training tensors
//! are shifted by [`HU_OFFSET`] and scaled per image by their maximum into
//! roughly `[-1, 1]`.

mod io;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use io::{
    clean_image_path, dataset_manifest, parse_manifest, read_dataset, read_ground_truth, write_dataset, ManifestEntry,
    RoiEntry, RoiFile, MANIFEST_HEADER,
};

use crate::error::{Error, Result};
use crate::metrics::Roi;
use crate::nn::DomainLabel;
use crate::real::Real;
use crate::tensor::Tensor;

/// Shift applied before max-normalization so stored values are nonnegative
/// apart from noise in air.
pub const HU_OFFSET: f64 = 1000.0;
pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 1000.0;

/// Phase with no deformation.
pub const REFERENCE_PHASE: u32 = 1;
/// Phase at which the deformation reaches its nominal amplitude.
pub const NOMINAL_PHASE: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Center column and row, in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes in pixels, before rotation.
    pub ax: f64,
    pub ay: f64,
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
    pub intensity: f64,
    /// Name of a flat region whose interior can hold an ROI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<RoiHint>,
}

/// ROI placed at an ellipse's center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiHint {
    pub label: String,
    pub w: usize,
    pub h: usize,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.ax;
        let v = (-s * dx + c * dy) / self.ay;
        u * u + v * v <= 1.0
    }

    /// Half-extents of the axis-aligned bounding box.
    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (((self.ax * c).powi(2) + (self.ay * s).powi(2)).sqrt(), ((self.ax * s).powi(2) + (self.ay * c).powi(2)).sqrt())
    }
}

/// Smooth displacement field made of a few plane waves per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    /// Per wave: `(axis, weight, fx, fy, phase)`; frequencies in cycles
    /// per canvas.
    waves: Vec<(u8, f64, f64, f64, f64)>,
    /// Largest displacement magnitude over the pixel grid before scaling.
    peak: f64,
}

impl DeformationField {
    pub fn random(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves = Vec::new();
        for axis in 0..2u8 {
            for _ in 0..3 {
                let w = rng.random_range(0.5..1.0);
                let fx = rng.random_range(0.3..1.2);
                let fy = rng.random_range(0.3..1.2);
                let ph = rng.random_range(0.0..2.0 * PI);
                waves.push((axis, w, fx, fy, ph));
            }
        }
        let mut field = DeformationField { waves, peak: 1.0 };
        let mut peak = 0.0f64;
        for r in 0..size {
            for c in 0..size {
                let (dx, dy) = field.raw(c as f64 + 0.5, r as f64 + 0.5, size);
                peak = peak.max(dx.hypot(dy));
            }
        }
        field.peak = peak.max(f64::MIN_POSITIVE);
        field
    }

    fn raw(&self, x: f64, y: f64, size: usize) -> (f64, f64) {
        let n = size as f64;
        let mut d = [0.0; 2];
        for &(axis, w, fx, fy, ph) in &self.waves {
            d[axis as usize] += w * (2.0 * PI * (fx * x + fy * y) / n + ph).sin();
        }
        (d[0], d[1])
    }

    /// Displacement at `(x, y)` with peak magnitude `scale` pixels.
    pub fn at(&self, x: f64, y: f64, size: usize, scale: f64) -> (f64, f64) {
        if scale == 0.0 {
            return (0.0, 0.0);
        }
        let (dx, dy) = self.raw(x, y, size);
        (dx * scale / self.peak, dy * scale / self.peak)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Square canvas side in pixels.
    pub size: usize,
    pub background: f64,
    /// Drawn in order; later ellipses overwrite earlier ones.
    pub ellipses: Vec<Ellipse>,
    /// Peak displacement in pixels between the reference and nominal phase.
    pub deformation_amplitude: f64,
    /// Subsamples per pixel along each axis.
    pub supersample: usize,
}

impl PhantomSpec {
    /// Chest-like phantom: body, lungs, heart with contrast-filled chambers,
    /// aorta and spine, with per-seed jitter of every shape.
    pub fn cardiac(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = size as f64 / 2.0;
        let mut e = |cx: f64, cy: f64, ax: f64, ay: f64, angle: f64, hu: f64, roi: Option<(&str, usize)>| {
            let j = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
            let ax = ax * (1.0 + j(&mut rng, 0.06));
            let ay = ay * (1.0 + j(&mut rng, 0.06));
            Ellipse {
                cx: half + (cx + j(&mut rng, 0.02)) * half,
                cy: half + (cy + j(&mut rng, 0.02)) * half,
                ax: ax * half,
                ay: ay * half,
                angle: angle + j(&mut rng, 0.1),
                intensity: (hu + j(&mut rng, 20.0)).clamp(HU_MIN, HU_MAX),
                roi: roi.map(|(label, side)| RoiHint { label: label.into(), w: side, h: side }),
            }
        };
        let roi_side = (size / 16).max(4);
        let ellipses = vec![
            e(0.0, 0.02, 0.8, 0.66, 0.0, 40.0, None),
            e(-0.42, -0.02, 0.27, 0.44, 0.1, -820.0, Some(("lung", roi_side + 2))),
            e(0.42, -0.02, 0.25, 0.42, -0.1, -820.0, None),
            e(0.08, 0.06, 0.32, 0.27, 0.4, 60.0, None),
            e(0.16, 0.1, 0.16, 0.13, 0.4, 330.0, Some(("ventricle", roi_side))),
            e(-0.08, -0.02, 0.1, 0.09, 0.0, 260.0, None),
            e(-0.02, -0.4, 0.12, 0.12, 0.0, 380.0, Some(("aorta", roi_side))),
            e(0.0, 0.52, 0.11, 0.1, 0.0, 700.0, Some(("spine", roi_side))),
        ];
        PhantomSpec { size, background: HU_MIN, ellipses, deformation_amplitude: 4.0, supersample: 4 }
    }

    /// Peak displacement at `phase`: zero at the reference phase, the nominal
    /// amplitude at [`NOMINAL_PHASE`], linear in between and beyond.
    pub fn phase_scale(&self, phase: u32) -> f64 {
        self.deformation_amplitude * (phase as f64 - REFERENCE_PHASE as f64) / (NOMINAL_PHASE - REFERENCE_PHASE) as f64
    }

    pub fn validate(&self, phase: u32) -> Result<()> {
        if !(1..=10).contains(&phase) {
            return Err(Error::Spec(format!("phase {phase} outside 1..=10")));
        }
        if self.size == 0 || self.supersample == 0 {
            return Err(Error::Spec("canvas size and supersampling must be positive".into()));
        }
        if !(self.deformation_amplitude >= 0.0 && self.deformation_amplitude.is_finite()) {
            return Err(Error::Spec(format!("bad deformation amplitude {}", self.deformation_amplitude)));
        }
        let range = HU_MIN..=HU_MAX;
        if !range.contains(&self.background) {
            return Err(Error::Spec(format!("background {} outside [{HU_MIN}, {HU_MAX}]", self.background)));
        }
        let margin = self.phase_scale(phase);
        let n = self.size as f64;
        for (i, e) in self.ellipses.iter().enumerate() {
            if !range.contains(&e.intensity) {
                return Err(Error::Spec(format!("ellipse {i} intensity {} outside [{HU_MIN}, {HU_MAX}]", e.intensity)));
            }
            if !(e.ax > 0.0 && e.ay > 0.0) {
                return Err(Error::Spec(format!("ellipse {i} has a non-positive axis")));
            }
            let (hx, hy) = e.half_extents();
            if e.cx - hx - margin < 0.0 || e.cx + hx + margin > n || e.cy - hy - margin < 0.0 || e.cy + hy + margin > n
            {
                return Err(Error::Spec(format!("ellipse {i} leaves the {0}x{0} canvas at phase {phase}", self.size)));
            }
        }
        Ok(())
    }

    /// Anti-aliased clean image `[size, size]` at `phase`. The deformation
    /// field is drawn from `seed`.
    pub fn render(&self, phase: u32, seed: u64) -> Result<Tensor<f32>> {
        self.validate(phase)?;
        let scale = self.phase_scale(phase);
        let field = DeformationField::random(self.size, seed);
        let (n, ss) = (self.size, self.supersample);
        let inv = 1.0 / (ss * ss) as f64;
        let mut out = vec![0.0f32; n * n];
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let x = c as f64 + (sx as f64 + 0.5) / ss as f64;
                        let y = r as f64 + (sy as f64 + 0.5) / ss as f64;
                        let (dx, dy) = field.at(x, y, n, scale);
                        acc += self.value_at(x - dx, y - dy);
                    }
                }
                out[r * n + c] = (acc * inv) as f32;
            }
        }
        Tensor::new([n, n], out)
    }

    fn value_at(&self, x: f64, y: f64) -> f64 {
        self.ellipses.iter().rev().find(|e| e.contains(x, y)).map_or(self.background, |e| e.intensity)
    }

    /// Flat-region ROIs at `phase`, centered on each hinted ellipse and moved
    /// with the deformation at its center.
    pub fn rois(&self, phase: u32, seed: u64) -> Result<Vec<Roi>> {
        self.validate(phase)?;
        let field = DeformationField::random(self.size, seed);
        let scale = self.phase_scale(phase);
        let mut out = Vec::new();
        for e in &self.ellipses {
            let Some(hint) = &e.roi else { continue };
            let (dx, dy) = field.at(e.cx, e.cy, self.size, scale);
            let x = (e.cx + dx - hint.w as f64 / 2.0).round().max(0.0) as usize;
            let y = (e.cy + dy - hint.h as f64 / 2.0).round().max(0.0) as usize;
            let roi = Roi::new(hint.label.clone(), x, y, hint.w, hint.h);
            roi.validate(self.size, self.size)?;
            out.push(roi);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoseModel {
    pub routine_dose_fraction: f64,
    pub low_dose_fraction: f64,
    /// Noise std at full dose, HU.
    pub base_noise_std: f64,
    /// Std of the row-streak component relative to the white-noise std.
    pub streak_fraction: f64,
}

impl Default for DoseModel {
    fn default() -> Self {
        DoseModel { routine_dose_fraction: 1.0, low_dose_fraction: 0.2, base_noise_std: 25.0, streak_fraction: 0.3 }
    }
}

impl DoseModel {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("routine", self.routine_dose_fraction), ("low", self.low_dose_fraction)] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::contract(format!("{name} dose fraction {d} outside (0, 1]")));
            }
        }
        if !(self.base_noise_std >= 0.0 && self.base_noise_std.is_finite()) {
            return Err(Error::contract(format!("bad base noise std {}", self.base_noise_std)));
        }
        if !(self.streak_fraction >= 0.0 && self.streak_fraction.is_finite()) {
            return Err(Error::contract(format!("bad streak fraction {}", self.streak_fraction)));
        }
        Ok(())
    }

    /// White-noise std at `dose`.
    pub fn noise_std(&self, dose: f64) -> f64 {
        self.base_noise_std / dose.sqrt()
    }
}

/// Adds zero-mean Gaussian noise of std `sigma0 / sqrt(dose)` per pixel plus
/// a per-row offset (a horizontal streak) of std `streak_fraction` times
/// that. The last two axes are treated as rows and columns.
pub fn apply_dose_noise(clean: &Tensor<f32>, dose: f64, model: &DoseModel, seed: u64) -> Result<Tensor<f32>> {
    model.validate()?;
    if !(dose > 0.0 && dose <= 1.0) {
        return Err(Error::contract(format!("dose fraction {dose} outside (0, 1]")));
    }
    let std = model.noise_std(dose);
    if std == 0.0 {
        return Ok(clean.clone());
    }
    let w = *clean.shape().last().ok_or_else(|| Error::dim("noise needs at least one axis"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let streak = std * model.streak_fraction;
    let mut out = clean.clone();
    for row in out.data_mut().chunks_mut(w.max(1)) {
        let offset = if streak > 0.0 { streak * unit.sample(&mut rng) } else { 0.0 };
        for v in row {
            *v = (*v as f64 + offset + std * unit.sample(&mut rng)) as f32;
        }
    }
    Ok(out)
}

/// `2 (x / max_val - 0.5)`.
pub fn normalize<T: Real>(img: &Tensor<T>, max_val: f64) -> Result<Tensor<T>> {
    check_max(max_val)?;
    Ok(img.map(|x| T::from_f64(2.0 * (x.as_f64() / max_val - 0.5))))
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Real>(img: &Tensor<T>, max_val: f64) -> Result<Tensor<T>> {
    check_max(max_val)?;
    Ok(img.map(|x| T::from_f64((x.as_f64() / 2.0 + 0.5) * max_val)))
}

fn check_max(max_val: f64) -> Result<()> {
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::contract(format!("normalization constant must be finite and > 0, got {max_val}")));
    }
    Ok(())
}

/// Normalization constant of an HU image: its maximum after the offset.
pub fn normalization_constant(hu: &Tensor<f32>) -> Result<f64> {
    let max = hu.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 + HU_OFFSET));
    check_max(max).map_err(|_| Error::contract(format!("image maximum {max} (after offset) is not positive")))?;
    Ok(max)
}

/// HU image to network input, returning the normalization constant.
pub fn to_network(hu: &Tensor<f32>) -> Result<(Tensor<f32>, f64)> {
    let max = normalization_constant(hu)?;
    Ok((normalize(&hu.map(|v| (v as f64 + HU_OFFSET) as f32), max)?, max))
}

/// Network output back to HU with the constant from [`to_network`].
pub fn from_network(x: &Tensor<f32>, max: f64) -> Result<Tensor<f32>> {
    Ok(denormalize(x, max)?.map(|v| (v as f64 - HU_OFFSET) as f32))
}

/// Provenance of one dataset image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMeta {
    pub phantom: usize,
    pub phase: u32,
    pub dose: f64,
    pub geometry_seed: u64,
    pub deformation_seed: u64,
    pub noise_seed: u64,
}

/// A noisy image as training sees it.
#[derive(Clone, Debug)]
pub struct DomainImage {
    /// `[H, W]` on the HU-like scale.
    pub hu: Tensor<f32>,
    /// `[H, W]`, normalized by `norm_max`.
    pub normalized: Tensor<f32>,
    pub norm_max: f64,
    pub meta: ImageMeta,
}

impl DomainImage {
    pub fn new(hu: Tensor<f32>, meta: ImageMeta) -> Result<Self> {
        crate::metrics::plane(&hu)?;
        let (normalized, norm_max) = to_network(&hu)?;
        Ok(DomainImage { hu, normalized, norm_max, meta })
    }
}

/// The two unpaired training populations. Clean images are deliberately
/// absent; see [`GroundTruth`].
#[derive(Clone, Debug, Default)]
pub struct UnpairedDataset {
    pub a: Vec<DomainImage>,
    pub b: Vec<DomainImage>,
}

impl UnpairedDataset {
    pub fn domain(&self, label: DomainLabel) -> &[DomainImage] {
        match label {
            DomainLabel::LowDose => &self.a,
            DomainLabel::RoutineDose => &self.b,
        }
    }
}

/// Evaluation-only data, index-aligned with the dataset's domain lists.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub clean_a: Vec<Tensor<f32>>,
    pub clean_b: Vec<Tensor<f32>>,
    pub rois_a: Vec<Vec<Roi>>,
    pub rois_b: Vec<Vec<Roi>>,
}

/// Phase and dose of one domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRecipe {
    pub phase: u32,
    pub dose: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetRecipe {
    pub size: usize,
    pub deformation_amplitude: f64,
    pub dose: DoseModel,
    pub a: DomainRecipe,
    pub b: DomainRecipe,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        let dose = DoseModel::default();
        DatasetRecipe {
            size: 128,
            deformation_amplitude: 4.0,
            a: DomainRecipe { phase: REFERENCE_PHASE, dose: dose.low_dose_fraction },
            b: DomainRecipe { phase: NOMINAL_PHASE, dose: dose.routine_dose_fraction },
            dose,
        }
    }
}

impl DatasetRecipe {
    /// Both domains drawn from one distribution: the routine-dose,
    /// reference-phase recipe.
    pub fn identical_domains(&self) -> Self {
        let r = DomainRecipe { phase: REFERENCE_PHASE, dose: self.dose.routine_dose_fraction };
        DatasetRecipe { a: r, b: r, ..self.clone() }
    }
}

/// Per-phantom seeds derived from the dataset seed.
#[derive(Clone, Copy, Debug)]
struct PhantomSeeds {
    geometry: u64,
    deformation: u64,
    noise_a: u64,
    noise_b: u64,
}

/// A noisy image with its clean counterpart and flat-region ROIs.
type RenderedImage = (DomainImage, Tensor<f32>, Vec<Roi>);

/// Renders `n` phantoms. Phantom `i` contributes its `a`-recipe image to
/// domain A and its `b`-recipe image to domain B; the two lists are then
/// shuffled independently.
pub fn make_unpaired_dataset(n: usize, recipe: &DatasetRecipe, seed: u64) -> Result<(UnpairedDataset, GroundTruth)> {
    if n < 2 {
        return Err(Error::contract(format!("need at least 2 phantoms, got {n}")));
    }
    recipe.dose.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<PhantomSeeds> = (0..n)
        .map(|_| PhantomSeeds {
            geometry: master.random(),
            deformation: master.random(),
            noise_a: master.random(),
            noise_b: master.random(),
        })
        .collect();
    let mut order_a: Vec<usize> = (0..n).collect();
    let mut order_b = order_a.clone();
    order_a.shuffle(&mut ChaCha8Rng::seed_from_u64(master.random()));
    order_b.shuffle(&mut ChaCha8Rng::seed_from_u64(master.random()));

    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for (i, s) in seeds.iter().enumerate() {
        let mut spec = PhantomSpec::cardiac(recipe.size, s.geometry);
        spec.deformation_amplitude = recipe.deformation_amplitude;
        let one = |dom: DomainRecipe, noise_seed: u64| -> Result<(DomainImage, Tensor<f32>, Vec<Roi>)> {
            let clean = spec.render(dom.phase, s.deformation)?;
            let noisy = apply_dose_noise(&clean, dom.dose, &recipe.dose, noise_seed)?;
            let meta = ImageMeta {
                phantom: i,
                phase: dom.phase,
                dose: dom.dose,
                geometry_seed: s.geometry,
                deformation_seed: s.deformation,
                noise_seed,
            };
            Ok((DomainImage::new(noisy, meta)?, clean, spec.rois(dom.phase, s.deformation)?))
        };
        a.push(one(recipe.a, s.noise_a)?);
        b.push(one(recipe.b, s.noise_b)?);
    }
    let pick = |src: &mut Vec<Option<RenderedImage>>, order: &[usize]| {
        let mut imgs = Vec::with_capacity(order.len());
        let mut clean = Vec::with_capacity(order.len());
        let mut rois = Vec::with_capacity(order.len());
        for &i in order {
            let (d, c, r) = src[i].take().expect("each index used once");
            imgs.push(d);
            clean.push(c);
            rois.push(r);
        }
        (imgs, clean, rois)
    };
    let (a, clean_a, rois_a) = pick(&mut a.into_iter().map(Some).collect(), &order_a);
    let (b, clean_b, rois_b) = pick(&mut b.into_iter().map(Some).collect(), &order_b);
    Ok((UnpairedDataset { a, b }, GroundTruth { clean_a, clean_b, rois_a, rois_b }))
}

/// `batch` random `patch x patch` crops from one domain as `[batch,1,p,p]`.
/// Each sample draws an image index and a top-left corner uniformly.
pub fn sample_patch_batch(
    images: &[DomainImage],
    patch: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<f32>> {
    if images.is_empty() || batch == 0 || patch == 0 {
        return Err(Error::contract("patch sampling needs images, a positive batch and a positive patch"));
    }
    for (i, img) in images.iter().enumerate() {
        let (h, w) = crate::metrics::plane(&img.normalized)?;
        if h < patch || w < patch {
            return Err(Error::contract(format!("image {i} is {h}x{w}, smaller than the {patch}x{patch} patch")));
        }
    }
    let mut data = Vec::with_capacity(batch * patch * patch);
    for _ in 0..batch {
        let img = &images[rng.random_range(0..images.len())].normalized;
        let (h, w) = crate::metrics::plane(img)?;
        let top = rng.random_range(0..=h - patch);
        let left = rng.random_range(0..=w - patch);
        let d = img.data();
        for r in top..top + patch {
            data.extend_from_slice(&d[r * w + left..r * w + left + patch]);
        }
    }
    Tensor::new([batch, 1, patch, patch], data)
}
