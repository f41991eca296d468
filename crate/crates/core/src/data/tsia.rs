//! Filling image slots for training: own images, images borrowed from the
//! most record-similar same-label patient, or zero pseudo images.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{cosine_similarity, Image, NormalizedRecord, PatientSet};
use crate::embedding::{FUNDUS_CHANNELS, OCT_CHANNELS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Fundus,
    Oct,
}

impl Slot {
    fn channels(self) -> usize {
        match self {
            Slot::Fundus => FUNDUS_CHANNELS,
            Slot::Oct => OCT_CHANNELS,
        }
    }

    fn images(self, p: &PatientSet) -> &[Image] {
        match self {
            Slot::Fundus => p.fundus.as_slice(),
            Slot::Oct => &p.oct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Own,
    Borrowed(String),
    Pseudo,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Own => f.write_str("own"),
            Provenance::Borrowed(id) => write!(f, "borrowed-from:{id}"),
            Provenance::Pseudo => f.write_str("pseudo"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedSample {
    pub id: String,
    pub fundus: Image,
    pub fundus_src: Provenance,
    pub oct: Image,
    pub oct_src: Provenance,
    pub record: NormalizedRecord,
    pub label_arms2: usize,
    pub label_cfh: usize,
    pub flipped: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MaskMode {
    #[default]
    None,
    WithoutOct,
    WithoutFundus,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::None, MaskMode::WithoutOct, MaskMode::WithoutFundus];
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::None => "none",
            MaskMode::WithoutOct => "without_oct",
            MaskMode::WithoutFundus => "without_fundus",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "without_oct" => Ok(MaskMode::WithoutOct),
            "without_fundus" => Ok(MaskMode::WithoutFundus),
            _ => Err(Error::Config(format!("unknown mask mode {s:?}"))),
        }
    }
}

/// Patients eligible as image donors. Only training patients may be
/// members; every member whose labels or record are read is logged.
pub struct DonorPool<'a> {
    members: Vec<&'a PatientSet>,
    consulted: RefCell<BTreeSet<usize>>,
}

impl<'a> DonorPool<'a> {
    pub fn new(members: Vec<&'a PatientSet>) -> Self {
        Self { members, consulted: RefCell::new(BTreeSet::new()) }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|p| p.id.as_str())
    }

    /// Ids of every member inspected so far.
    pub fn consulted(&self) -> Vec<String> {
        self.consulted.borrow().iter().map(|&i| self.members[i].id.clone()).collect()
    }

    /// Same joint label pair, at least one image in `slot`, highest record
    /// cosine similarity; ties go to the lowest id.
    pub fn find_donor(&self, p: &PatientSet, slot: Slot) -> Option<&'a PatientSet> {
        let target = p.normalized_record();
        let mut best: Option<(f64, &'a PatientSet)> = None;
        for (i, &c) in self.members.iter().enumerate() {
            if c.id == p.id {
                continue;
            }
            self.consulted.borrow_mut().insert(i);
            if c.labels() != p.labels() || slot.images(c).is_empty() {
                continue;
            }
            let sim = cosine_similarity(&target, &c.normalized_record());
            if sim == f64::NEG_INFINITY {
                continue;
            }
            let better = match best {
                None => true,
                Some((bs, b)) => sim > bs || (sim == bs && c.id < b.id),
            };
            if better {
                best = Some((sim, c));
            }
        }
        best.map(|(_, c)| c)
    }
}

/// Half the time the pseudo image, otherwise a uniform pick from `images`.
fn coin_or_pick<R: Rng + ?Sized>(images: &[Image], rng: &mut R) -> Option<Image> {
    if rng.gen_bool(0.5) {
        None
    } else {
        Some(images[rng.gen_range(0..images.len())].clone())
    }
}

fn base_sample(p: &PatientSet, size: usize) -> ResolvedSample {
    ResolvedSample {
        id: p.id.clone(),
        fundus: Image::zeros(FUNDUS_CHANNELS, size, size),
        fundus_src: Provenance::Pseudo,
        oct: Image::zeros(OCT_CHANNELS, size, size),
        oct_src: Provenance::Pseudo,
        record: p.normalized_record(),
        label_arms2: p.label_arms2,
        label_cfh: p.label_cfh,
        flipped: false,
    }
}

fn set_slot(s: &mut ResolvedSample, slot: Slot, img: Image, src: Provenance) {
    match slot {
        Slot::Fundus => {
            s.fundus = img;
            s.fundus_src = src;
        }
        Slot::Oct => {
            s.oct = img;
            s.oct_src = src;
        }
    }
}

/// Training-time resolution with TSIA.
///
/// The fundus slot keeps the patient's own fundus when present. The OCT
/// slot, when the patient has OCTs, is the pseudo image with probability
/// 1/2 and otherwise a uniform pick of its own OCTs. A missing slot is
/// filled from the best donor's set under the same 1/2 rule, or with the
/// pseudo image when no donor qualifies.
pub fn tsia_resolve<R: Rng + ?Sized>(p: &PatientSet, pool: &DonorPool<'_>, size: usize, rng: &mut R) -> ResolvedSample {
    let mut s = base_sample(p, size);
    if let Some(f) = &p.fundus {
        set_slot(&mut s, Slot::Fundus, f.clone(), Provenance::Own);
    }
    for slot in [Slot::Fundus, Slot::Oct] {
        let own = slot.images(p);
        if slot == Slot::Oct && !own.is_empty() {
            if let Some(img) = coin_or_pick(own, rng) {
                set_slot(&mut s, slot, img, Provenance::Own);
            }
        } else if own.is_empty() {
            if let Some(donor) = pool.find_donor(p, slot) {
                if let Some(img) = coin_or_pick(slot.images(donor), rng) {
                    set_slot(&mut s, slot, img, Provenance::Borrowed(donor.id.clone()));
                }
            }
        }
    }
    debug_assert_eq!(s.fundus.channels, Slot::Fundus.channels());
    s
}

/// Training-time resolution without TSIA: own images, a uniform pick among
/// own OCTs, pseudo images for whatever is missing.
pub fn resolve_plain<R: Rng + ?Sized>(p: &PatientSet, size: usize, rng: &mut R) -> ResolvedSample {
    let mut s = base_sample(p, size);
    if let Some(f) = &p.fundus {
        set_slot(&mut s, Slot::Fundus, f.clone(), Provenance::Own);
    }
    if !p.oct.is_empty() {
        let img = p.oct[rng.gen_range(0..p.oct.len())].clone();
        set_slot(&mut s, Slot::Oct, img, Provenance::Own);
    }
    s
}

/// Evaluation-time resolution: own fundus, own first OCT, pseudo otherwise.
/// Never consults other patients.
pub fn resolve_eval(p: &PatientSet, size: usize) -> ResolvedSample {
    let mut s = base_sample(p, size);
    if let Some(f) = &p.fundus {
        set_slot(&mut s, Slot::Fundus, f.clone(), Provenance::Own);
    }
    if let Some(o) = p.oct.first() {
        set_slot(&mut s, Slot::Oct, o.clone(), Provenance::Own);
    }
    s
}

/// Replaces the named modality with its pseudo image.
pub fn mask_modality(mut s: ResolvedSample, mode: MaskMode) -> ResolvedSample {
    let size = s.fundus.height;
    match mode {
        MaskMode::None => {}
        MaskMode::WithoutOct => set_slot(&mut s, Slot::Oct, Image::zeros(OCT_CHANNELS, size, size), Provenance::Pseudo),
        MaskMode::WithoutFundus => {
            set_slot(&mut s, Slot::Fundus, Image::zeros(FUNDUS_CHANNELS, size, size), Provenance::Pseudo)
        }
    }
    s
}

/// Horizontal flip of both images with probability 1/2, one decision per sample.
pub fn augment_train<R: Rng + ?Sized>(s: ResolvedSample, rng: &mut R) -> ResolvedSample {
    let flip = rng.gen_bool(0.5);
    if flip {
        flip_sample(s)
    } else {
        s
    }
}

pub fn flip_sample(mut s: ResolvedSample) -> ResolvedSample {
    s.fundus = s.fundus.flip_horizontal();
    s.oct = s.oct.flip_horizontal();
    s.flipped = !s.flipped;
    s
}
