//! Synthetic surrogate dataset with planted, label-dependent structure.
//!
//! Fundus: noisy background, K bright blobs (many when ARMS2 = 1, few
//! otherwise) and one dark disc placed independently of the labels.
//! OCT: a horizontal bright band, thick when CFH = 1, plus rows of speckle.
//! Records: age shifted by CFH, smoking more likely with ARMS2.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{allele_class, write_manifest, ManifestEntry, RawRecord};
use super::{Image, PatientSet};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const ANNOTATIONS_FILE: &str = "annotations.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub sets: usize,
    pub image_size: usize,
    /// Fraction of patients with at least one OCT image.
    pub oct_fraction: f64,
    /// Fraction of OCT-holding patients without a fundus image.
    pub missing_fundus_fraction: f64,
    pub max_oct: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { sets: 1192, image_size: 48, oct_fraction: 200.0 / 1192.0, missing_fundus_fraction: 0.1, max_oct: 3 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sets == 0 || self.image_size < 16 || self.max_oct == 0 {
            return Err(Error::Config("synthetic data needs sets > 0, image size >= 16, max OCT > 0".into()));
        }
        for (name, v) in [("oct fraction", self.oct_fraction), ("missing fundus fraction", self.missing_fundus_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    Blob,
    Disc,
}

/// Planted circle in fundus pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: String,
    pub kind: Feature,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Annotation {
    /// Patch-grid cells `(row, col)` the circle overlaps.
    pub fn cells(&self, patch: usize, grid: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for row in 0..grid {
            for col in 0..grid {
                let (x0, y0) = ((col * patch) as f64, (row * patch) as f64);
                let (x1, y1) = (x0 + patch as f64, y0 + patch as f64);
                let dx = self.cx.clamp(x0, x1) - self.cx;
                let dy = self.cy.clamp(y0, y1) - self.cy;
                if dx * dx + dy * dy < self.r * self.r {
                    out.push((row, col));
                }
            }
        }
        out
    }
}

pub struct Synthetic {
    pub patients: Vec<PatientSet>,
    pub entries: Vec<ManifestEntry>,
    pub annotations: Vec<Annotation>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn alleles(rng: &mut ChaCha8Rng) -> u8 {
    if rng.gen_bool(0.5) {
        2
    } else {
        rng.gen_range(0..2)
    }
}

fn render_fundus(id: &str, arms2: usize, size: usize, rng: &mut ChaCha8Rng) -> (Image, Vec<Annotation>) {
    let s = size as f64;
    let base = [0.62, 0.32, 0.18];
    let mut px = vec![0.0f64; 3 * size * size];
    for c in 0..3 {
        for i in 0..size * size {
            px[c * size * size + i] = base[c] + rng.gen_range(-0.04..0.04);
        }
    }
    let rd = 0.1 * s;
    let disc = (rng.gen_range(rd + 1.0..s - rd - 1.0), rng.gen_range(rd + 1.0..s - rd - 1.0));
    let k = if arms2 == 1 { rng.gen_range(4..=7) } else { rng.gen_range(0..=2) };
    let mut blobs: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..k {
        for _attempt in 0..200 {
            let r = rng.gen_range(0.04 * s..0.06 * s);
            let c = (rng.gen_range(r + 1.0..s - r - 1.0), rng.gen_range(r + 1.0..s - r - 1.0));
            let clear_disc = (c.0 - disc.0).hypot(c.1 - disc.1) > rd + r + 2.0;
            let clear_blobs = blobs.iter().all(|b| (c.0 - b.0).hypot(c.1 - b.1) > r + b.2 + 1.0);
            if clear_disc && clear_blobs {
                blobs.push((c.0, c.1, r));
                break;
            }
        }
    }
    let paint = |px: &mut [f64], (cx, cy, r): (f64, f64, f64), color: [f64; 3]| {
        for y in 0..size {
            for x in 0..size {
                if (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r {
                    for c in 0..3 {
                        px[(c * size + y) * size + x] = color[c];
                    }
                }
            }
        }
    };
    paint(&mut px, (disc.0, disc.1, rd), [0.12, 0.06, 0.04]);
    let mut notes = vec![Annotation { id: id.into(), kind: Feature::Disc, cx: disc.0, cy: disc.1, r: rd }];
    for &b in &blobs {
        paint(&mut px, b, [0.98, 0.92, 0.55]);
        notes.push(Annotation { id: id.into(), kind: Feature::Blob, cx: b.0, cy: b.1, r: b.2 });
    }
    let img = Image::new(3, size, size, px.into_iter().map(to_byte).collect()).expect("sized buffer");
    (img, notes)
}

fn render_oct(cfh: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let thick = if cfh == 1 { (0.22 * s).round() as usize } else { (0.08 * s).round() as usize };
    let top = rng.gen_range((0.3 * s) as usize..(0.7 * s) as usize - thick);
    let band = top..top + thick;
    let mut px = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let v = if band.contains(&y) { rng.gen_range(0.7..0.85) } else { rng.gen_range(0.0..0.08) };
            px[y * size + x] = to_byte(v);
        }
    }
    let speckle_rows = rng.gen_range(2..=4);
    for _ in 0..speckle_rows {
        let y = rng.gen_range(0..size);
        if y + 2 >= band.start && y < band.end + 2 {
            continue;
        }
        for x in 0..size {
            if rng.gen_bool(0.5) {
                px[y * size + x] = to_byte(rng.gen_range(0.0..1.0));
            }
        }
    }
    Image::new(1, size, size, px).expect("sized buffer")
}

/// Builds the dataset in memory. Deterministic in `seed`.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.sets;
    let n_oct = ((n as f64 * cfg.oct_fraction).round() as usize).min(n);
    let mut has_oct = vec![false; n];
    for i in sample(&mut rng, n, n_oct) {
        has_oct[i] = true;
    }
    let oct_holders: Vec<usize> = (0..n).filter(|&i| has_oct[i]).collect();
    let n_missing = ((n_oct as f64 * cfg.missing_fundus_fraction).round() as usize).min(n_oct);
    let mut no_fundus = vec![false; n];
    for j in sample(&mut rng, oct_holders.len(), n_missing) {
        no_fundus[oct_holders[j]] = true;
    }

    let mut patients = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    let mut annotations = Vec::new();
    let width = n.to_string().len().max(4);
    for i in 0..n {
        let id = format!("S{i:0width$}");
        let (a_alleles, c_alleles) = (alleles(&mut rng), alleles(&mut rng));
        let (arms2, cfh) = (allele_class(a_alleles)?, allele_class(c_alleles)?);
        let (fundus, notes) = render_fundus(&id, arms2, cfg.image_size, &mut rng);
        let n_img = if has_oct[i] { rng.gen_range(1..=cfg.max_oct) } else { 0 };
        let oct: Vec<Image> = (0..n_img).map(|_| render_oct(cfh, cfg.image_size, &mut rng)).collect();
        let age_dist = Normal::new(55.0 + 20.0 * cfh as f64, 5.0).expect("valid normal");
        let age = (age_dist.sample(&mut rng).clamp(20.0, 99.0) * 10.0).round() / 10.0;
        let gender = rng.gen_range(0..2u8);
        let smoking = rng.gen_bool(if arms2 == 1 { 0.7 } else { 0.2 }) as u8;
        let record = RawRecord { age, gender, smoking };
        let fundus = (!no_fundus[i]).then_some(fundus);
        if fundus.is_some() {
            annotations.extend(notes);
        }
        entries.push(ManifestEntry {
            id: id.clone(),
            fundus: fundus.as_ref().map(|_| format!("images/{id}.fundus.ppm")),
            oct: (0..n_img).map(|j| format!("images/{id}.oct{j}.pgm")).collect(),
            record,
            arms2_alleles: a_alleles,
            cfh_alleles: c_alleles,
        });
        patients.push(PatientSet { id, fundus, oct, record, label_arms2: arms2, label_cfh: cfh });
    }
    Ok(Synthetic { patients, entries, annotations })
}

pub fn format_annotations(notes: &[Annotation]) -> String {
    let mut out = String::from("# id\tkind\tcx\tcy\tr\n");
    for a in notes {
        let kind = match a.kind {
            Feature::Blob => "blob",
            Feature::Disc => "disc",
        };
        let _ = writeln!(out, "{}\t{kind}\t{}\t{}\t{}", a.id, a.cx, a.cy, a.r);
    }
    out
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = || Error::format(path, format!("line {}: malformed annotation", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err());
        }
        let kind = match f[1] {
            "blob" => Feature::Blob,
            "disc" => Feature::Disc,
            _ => return Err(err()),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| err());
        out.push(Annotation { id: f[0].into(), kind, cx: num(f[2])?, cy: num(f[3])?, r: num(f[4])? });
    }
    Ok(out)
}

/// Writes `manifest.tsv`, `annotations.tsv` and `images/` under `out`.
/// Returns the manifest path.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    let data = synthesize(cfg, seed)?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (p, e) in data.patients.iter().zip(&data.entries) {
        if let (Some(img), Some(rel)) = (&p.fundus, &e.fundus) {
            img.write(&out.join(rel))?;
        }
        for (img, rel) in p.oct.iter().zip(&e.oct) {
            img.write(&out.join(rel))?;
        }
    }
    let manifest = out.join(MANIFEST_FILE);
    write_manifest(&manifest, &data.entries)?;
    let notes = out.join(ANNOTATIONS_FILE);
    std::fs::write(&notes, format_annotations(&data.annotations)).map_err(|e| Error::io(&notes, e))?;
    Ok(manifest)
}
