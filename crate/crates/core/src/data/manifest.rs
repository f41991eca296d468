//! Tab-separated dataset manifest.
//!
//! One patient per line: `id, fundus path, OCT paths, age, gender, smoking,
//! ARMS2 alleles, CFH alleles`. A missing image is written as `-`; OCT
//! paths are comma-separated. Paths are relative to the manifest's
//! directory. Lines starting with `#` are comments.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "# id\tfundus\toct\tage\tgender\tsmoking\tarms2_alleles\tcfh_alleles";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawRecord {
    /// Years.
    pub age: f64,
    pub gender: u8,
    pub smoking: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub fundus: Option<String>,
    pub oct: Vec<String>,
    pub record: RawRecord,
    pub arms2_alleles: u8,
    pub cfh_alleles: u8,
}

/// Risk-allele count to class: `{0, 1}` → 0, `2` → 1.
pub fn allele_class(count: u8) -> Result<usize> {
    match count {
        0 | 1 => Ok(0),
        2 => Ok(1),
        _ => Err(Error::Argument(format!("risk allele count {count} is outside 0..=2"))),
    }
}

fn is_missing(field: &str) -> bool {
    // Accept the typographic minus as well as the ASCII hyphen.
    matches!(field, "-" | "\u{2212}")
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::format(path, format!("line {}: {msg}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 tab-separated fields, found {}", f.len())));
        }
        let id = f[0].trim().to_string();
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(err(format!("empty or duplicate id {id:?}")));
        }
        let fundus = (!is_missing(f[1])).then(|| f[1].to_string());
        let oct: Vec<String> = if is_missing(f[2]) {
            Vec::new()
        } else {
            f[2].split(',').map(str::to_string).collect()
        };
        if oct.iter().any(String::is_empty) || fundus.as_deref() == Some("") {
            return Err(err("empty image path".into()));
        }
        if fundus.is_none() && oct.is_empty() {
            return Err(err(format!("patient {id} has neither a fundus nor an OCT image")));
        }
        let age: f64 = f[3].parse().map_err(|_| err(format!("bad age {:?}", f[3])))?;
        if !age.is_finite() || age < 0.0 {
            return Err(err(format!("bad age {age}")));
        }
        let flag = |s: &str, name: &str| -> Result<u8> {
            match s {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(err(format!("{name} must be 0 or 1, got {s:?}"))),
            }
        };
        let alleles = |s: &str, name: &str| -> Result<u8> {
            match s.parse::<u8>() {
                Ok(v) if v <= 2 => Ok(v),
                _ => Err(err(format!("{name} allele count must be 0, 1 or 2, got {s:?}"))),
            }
        };
        entries.push(ManifestEntry {
            id,
            fundus,
            oct,
            record: RawRecord { age, gender: flag(f[4], "gender")?, smoking: flag(f[5], "smoking")? },
            arms2_alleles: alleles(f[6], "ARMS2")?,
            cfh_alleles: alleles(f[7], "CFH")?,
        });
    }
    Ok(entries)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        let oct = if e.oct.is_empty() { "-".to_string() } else { e.oct.join(",") };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            e.fundus.as_deref().unwrap_or("-"),
            oct,
            e.record.age,
            e.record.gender,
            e.record.smoking,
            e.arms2_alleles,
            e.cfh_alleles
        );
    }
    out
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, format_manifest(entries)).map_err(|e| Error::io(path, e))
}
