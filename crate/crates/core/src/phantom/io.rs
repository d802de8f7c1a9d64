//! Dataset directory layout:
//!
//! ```text
//! manifest.txt      one CSV row per noisy image
//! rois.toml         flat-region ROIs per noisy image
//! A/NNNN.tsr        low-dose images, HU-like scale, shape [H, W]
//! B/NNNN.tsr        routine-dose images
//! clean_A/NNNN.tsr  noise-free counterpart of A/NNNN.tsr
//! clean_B/NNNN.tsr
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DomainImage, GroundTruth, ImageMeta, UnpairedDataset};
use crate::error::{Error, Result};
use crate::metrics::{Roi, SNR_OFFSET};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "domain,file,phantom,phase,dose,geometry_seed,deformation_seed,noise_seed,norm_max";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub domain: char,
    /// Path relative to the dataset root, e.g. `A/0003.tsr`.
    pub file: String,
    pub meta: ImageMeta,
    pub norm_max: f64,
}

impl ManifestEntry {
    fn row(&self) -> String {
        let m = &self.meta;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.domain,
            self.file,
            m.phantom,
            m.phase,
            m.dose,
            m.geometry_seed,
            m.deformation_seed,
            m.noise_seed,
            self.norm_max
        )
    }

    /// Parses one manifest row.
    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(Error::format(format!("manifest row has {} fields, expected 9", f.len())));
        }
        let bad = |what: &str, s: &str| Error::format(format!("manifest: bad {what} {s:?}"));
        let domain = match f[0] {
            "A" => 'A',
            "B" => 'B',
            other => return Err(bad("domain", other)),
        };
        check_relative_file(f[1], domain)?;
        let int = |i: usize, what: &str| f[i].parse::<u64>().map_err(|_| bad(what, f[i]));
        let real =
            |i: usize, what: &str| f[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(what, f[i]));
        let phase = u32::try_from(int(3, "phase")?).map_err(|_| bad("phase", f[3]))?;
        Ok(ManifestEntry {
            domain,
            file: f[1].to_string(),
            meta: ImageMeta {
                phantom: usize::try_from(int(2, "phantom")?).map_err(|_| bad("phantom", f[2]))?,
                phase,
                dose: real(4, "dose")?,
                geometry_seed: int(5, "geometry_seed")?,
                deformation_seed: int(6, "deformation_seed")?,
                noise_seed: int(7, "noise_seed")?,
            },
            norm_max: real(8, "norm_max")?,
        })
    }
}

/// Parses a whole manifest, header included.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some(h) if h.trim_end() == MANIFEST_HEADER => {}
        other => return Err(Error::format(format!("manifest header mismatch: {other:?}"))),
    }
    lines.map(ManifestEntry::parse).collect()
}

/// Accepts only `<domain>/<name>.tsr` with a plain file name.
fn check_relative_file(file: &str, domain: char) -> Result<()> {
    let ok = file
        .strip_prefix(domain)
        .and_then(|r| r.strip_prefix('/'))
        .and_then(|name| name.strip_suffix(".tsr").map(|stem| (name, stem)))
        .is_some_and(|(name, stem)| {
            !stem.is_empty()
                && !name.starts_with('.')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        });
    if ok {
        Ok(())
    } else {
        Err(Error::format(format!("manifest: file {file:?} is not of the form {domain}/<name>.tsr")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub file: String,
    pub rois: Vec<Roi>,
}

/// Contents of `rois.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiFile {
    pub snr_offset: f64,
    #[serde(default)]
    pub images: Vec<RoiEntry>,
}

impl RoiFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(format!("rois: {}", e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("ROI tables serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn rois_for(&self, file: &str) -> Option<&[Roi]> {
        self.images.iter().find(|e| e.file == file).map(|e| e.rois.as_slice())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_name(domain: char, i: usize) -> String {
    format!("{domain}/{i:04}.tsr")
}

/// Writes the dataset and its ground truth under `dir`.
pub fn write_dataset(dir: &Path, data: &UnpairedDataset, truth: &GroundTruth) -> Result<()> {
    for sub in ["A", "B", "clean_A", "clean_B"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut rois = RoiFile { snr_offset: SNR_OFFSET, images: Vec::new() };
    for (domain, imgs, clean, roi_lists) in
        [('A', &data.a, &truth.clean_a, &truth.rois_a), ('B', &data.b, &truth.clean_b, &truth.rois_b)]
    {
        if clean.len() != imgs.len() || roi_lists.len() != imgs.len() {
            return Err(Error::contract(format!("ground truth for domain {domain} is not aligned with its images")));
        }
        for (i, img) in imgs.iter().enumerate() {
            let file = file_name(domain, i);
            img.hu.save(dir.join(&file))?;
            clean[i].save(dir.join(format!("clean_{file}")))?;
            let entry = ManifestEntry { domain, file: file.clone(), meta: img.meta.clone(), norm_max: img.norm_max };
            manifest.push_str(&entry.row());
            manifest.push('\n');
            rois.images.push(RoiEntry { file, rois: roi_lists[i].clone() });
        }
    }
    write_text(&dir.join("manifest.txt"), &manifest)?;
    write_text(&dir.join("rois.toml"), &rois.to_toml())
}

/// Reads and parses `manifest.txt` under a dataset root.
pub fn dataset_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&read_text(&dir.join("manifest.txt"))?)
}

/// Loads the noisy images listed in the manifest. The recorded
/// normalization constant must match the image.
pub fn read_dataset(dir: &Path) -> Result<UnpairedDataset> {
    let mut data = UnpairedDataset::default();
    for entry in dataset_manifest(dir)? {
        let hu = Tensor::load(dir.join(&entry.file))?;
        let img = DomainImage::new(hu, entry.meta)?;
        if img.norm_max != entry.norm_max {
            return Err(Error::format(format!(
                "{}: manifest norm_max {} but image gives {}",
                entry.file, entry.norm_max, img.norm_max
            )));
        }
        match entry.domain {
            'A' => data.a.push(img),
            _ => data.b.push(img),
        }
    }
    if data.a.is_empty() || data.b.is_empty() {
        return Err(Error::format(format!("{}: dataset needs images in both domains", dir.display())));
    }
    Ok(data)
}

/// Loads clean images and ROIs aligned with [`read_dataset`]'s lists.
pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let rois = RoiFile::load(&dir.join("rois.toml"))?;
    let mut truth = GroundTruth::default();
    for entry in dataset_manifest(dir)? {
        let clean = Tensor::load(clean_image_path(dir, &entry.file))?;
        let r = rois
            .rois_for(&entry.file)
            .ok_or_else(|| Error::format(format!("rois.toml has no entry for {}", entry.file)))?
            .to_vec();
        let (c, rs) = match entry.domain {
            'A' => (&mut truth.clean_a, &mut truth.rois_a),
            _ => (&mut truth.clean_b, &mut truth.rois_b),
        };
        c.push(clean);
        rs.push(r);
    }
    Ok(truth)
}

/// Path of the noise-free counterpart of a manifest file.
pub fn clean_image_path(dir: &Path, file: &str) -> PathBuf {
    dir.join(format!("clean_{file}"))
}
