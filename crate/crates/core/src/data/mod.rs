//! Patients, the on-disk dataset, record normalization and augmentation.

mod image;
mod manifest;
pub mod synth;
pub mod tsia;

use std::path::{Path, PathBuf};

pub use self::image::Image;
pub use manifest::{
    allele_class, format_manifest, parse_manifest, read_manifest, write_manifest, ManifestEntry, RawRecord,
    MANIFEST_HEADER,
};

use crate::embedding::{FUNDUS_CHANNELS, OCT_CHANNELS};
use crate::error::{Error, Result};

pub const RECORD_FIELDS: usize = 3;

pub type NormalizedRecord = [f64; RECORD_FIELDS];

/// `[age / 100 clamped to [0, 1], gender, smoking]`.
pub fn normalize_record(raw: &RawRecord) -> NormalizedRecord {
    [(raw.age / 100.0).clamp(0.0, 1.0), raw.gender as f64, raw.smoking as f64]
}

/// Cosine of the angle between two records; `-inf` when either is zero so
/// such records never win a similarity match.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientSet {
    pub id: String,
    pub fundus: Option<Image>,
    pub oct: Vec<Image>,
    pub record: RawRecord,
    pub label_arms2: usize,
    pub label_cfh: usize,
}

impl PatientSet {
    pub fn labels(&self) -> (usize, usize) {
        (self.label_arms2, self.label_cfh)
    }

    pub fn normalized_record(&self) -> NormalizedRecord {
        normalize_record(&self.record)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub patients: Vec<PatientSet>,
    /// Side length shared by every image.
    pub image_size: usize,
}

impl Dataset {
    pub fn new(patients: Vec<PatientSet>) -> Result<Self> {
        let mut size = None;
        for p in &patients {
            if p.fundus.is_none() && p.oct.is_empty() {
                return Err(Error::Argument(format!("patient {} has no images", p.id)));
            }
            for (img, channels) in p.fundus.iter().map(|f| (f, FUNDUS_CHANNELS)).chain(p.oct.iter().map(|o| (o, OCT_CHANNELS))) {
                if img.channels != channels || img.height != img.width {
                    return Err(Error::Dimension(format!(
                        "patient {}: image is {}x{}x{}, expected square with {channels} channels",
                        p.id, img.channels, img.height, img.width
                    )));
                }
                match size {
                    None => size = Some(img.height),
                    Some(s) if s != img.height => {
                        return Err(Error::Dimension(format!(
                            "patient {}: image side {} differs from {s}",
                            p.id, img.height
                        )))
                    }
                    _ => {}
                }
            }
        }
        let image_size = size.ok_or_else(|| Error::Argument("dataset is empty".into()))?;
        Ok(Self { patients, image_size })
    }

    /// Loads a manifest and every image it references.
    pub fn load(manifest: &Path) -> Result<Self> {
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let entries = read_manifest(manifest)?;
        let patients = entries
            .into_iter()
            .map(|e| {
                Ok(PatientSet {
                    fundus: e.fundus.as_ref().map(|f| Image::read(&base.join(f))).transpose()?,
                    oct: e.oct.iter().map(|o| Image::read(&base.join(o))).collect::<Result<_>>()?,
                    record: e.record,
                    label_arms2: allele_class(e.arms2_alleles)?,
                    label_cfh: allele_class(e.cfh_alleles)?,
                    id: e.id,
                })
            })
            .collect::<Result<_>>()?;
        Self::new(patients)
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.patients.iter().position(|p| p.id == id)
    }
}
