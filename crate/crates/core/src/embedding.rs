//! Multi-modal embedding: per-modality patch projections, per-attribute
//! record MLPs, and concatenation into one token sequence.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp2, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const FUNDUS_CHANNELS: usize = 3;
pub const OCT_CHANNELS: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MmeConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Number of record attributes, i.e. table tokens. Zero disables them.
    pub record_fields: usize,
}

impl Default for MmeConfig {
    fn default() -> Self {
        Self { image_size: 48, patch_size: 8, embed_dim: 64, record_fields: 3 }
    }
}

impl MmeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embed dim {} must be even and positive", self.embed_dim)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patches per image modality, `(H/P)²`.
    pub fn patches_per_image(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn image_tokens(&self) -> usize {
        2 * self.patches_per_image()
    }

    /// Sequence length `2(H/P)² + t`.
    pub fn seq_len(&self) -> usize {
        self.image_tokens() + self.record_fields
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.grid(), self.record_fields)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Fundus,
    Oct,
    Table,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Fundus => "fundus",
            Modality::Oct => "oct",
            Modality::Table => "table",
        }
    }
}

/// Modality tag and patch grid position of every token in one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub tags: Vec<Modality>,
    /// `(row, col)` within the token's own image; `None` for table tokens.
    pub coords: Vec<Option<(usize, usize)>>,
    pub grid: usize,
}

impl TokenLayout {
    pub fn new(grid: usize, table: usize) -> Self {
        let per = grid * grid;
        let mut tags = Vec::with_capacity(2 * per + table);
        let mut coords = Vec::with_capacity(2 * per + table);
        for m in [Modality::Fundus, Modality::Oct] {
            for i in 0..per {
                tags.push(m);
                coords.push(Some((i / grid, i % grid)));
            }
        }
        for _ in 0..table {
            tags.push(Modality::Table);
            coords.push(None);
        }
        Self { tags, coords, grid }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn patches_per_image(&self) -> usize {
        self.grid * self.grid
    }

    pub fn image_tokens(&self) -> usize {
        2 * self.patches_per_image()
    }

    pub fn table_tokens(&self) -> usize {
        self.len() - self.image_tokens()
    }
}

/// Embedded tokens `[B·L, D]` (sample-major) plus their per-token layout.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub batch: usize,
    pub layout: Arc<TokenLayout>,
}

/// Splits `[C, H, W]` into `(H/P)²` rows of `C·P²` values: patches in
/// row-major grid order, each flattened channel-major.
pub fn patchify<T: Real>(img: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("patchify expects [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("image {h}x{w} is not divisible into {patch}px patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = c * patch * patch;
    let mut out = Vec::with_capacity(gh * gw * row_len);
    let d = img.data();
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for py in 0..patch {
                    let start = (ch * h + gy * patch + py) * w + gx * patch;
                    out.extend_from_slice(&d[start..start + patch]);
                }
            }
        }
    }
    Tensor::new([gh * gw, row_len], out)
}

/// Inverse of [`patchify`] for a square image.
pub fn unpatchify<T: Real>(patches: &Tensor<T>, channels: usize, patch: usize) -> Result<Tensor<T>> {
    let n = patches.rows();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || patches.cols() != channels * patch * patch {
        return Err(Error::Dimension(format!(
            "cannot unpatchify {:?} with {channels} channels and patch {patch}",
            patches.shape()
        )));
    }
    let side = grid * patch;
    let mut img = vec![T::zero(); channels * side * side];
    for (i, row) in patches.data().chunks(channels * patch * patch).enumerate() {
        let (gy, gx) = (i / grid, i % grid);
        for ch in 0..channels {
            for py in 0..patch {
                let src = &row[(ch * patch + py) * patch..(ch * patch + py + 1) * patch];
                let start = (ch * side + gy * patch + py) * side + gx * patch;
                img[start..start + patch].copy_from_slice(src);
            }
        }
    }
    Tensor::new([channels, side, side], img)
}

/// Parameters of the embedding stage.
#[derive(Clone, Debug)]
pub struct Mme {
    pub cfg: MmeConfig,
    pub fundus_proj: Linear,
    pub oct_proj: Linear,
    /// One `1 → D → D` ReLU MLP per record attribute.
    pub table_mlps: Vec<Mlp2>,
    pub pos: ParamId,
}

impl Mme {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &MmeConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (p, d) = (cfg.patch_size, cfg.embed_dim);
        let fundus_proj = Linear::new(store, "mme.fundus", FUNDUS_CHANNELS * p * p, d, rng)?;
        let oct_proj = Linear::new(store, "mme.oct", OCT_CHANNELS * p * p, d, rng)?;
        let table_mlps = (0..cfg.record_fields)
            .map(|i| Mlp2::new(store, &format!("mme.table.{i}"), (1, d, d), Activation::Relu, rng))
            .collect::<Result<_>>()?;
        let pos = store.add("mme.pos", Tensor::randn([cfg.seq_len(), d], 0.02, rng))?;
        Ok(Self { cfg: cfg.clone(), fundus_proj, oct_proj, table_mlps, pos })
    }

    fn check_width<T: Real>(&self, tape: &Tape<T>, patches: Var, channels: usize) -> Result<()> {
        let want = channels * self.cfg.patch_size * self.cfg.patch_size;
        if tape.value(patches).cols() != want {
            return Err(Error::Dimension(format!(
                "patch rows of shape {:?} do not match expected width {want}",
                tape.shape(patches)
            )));
        }
        Ok(())
    }

    /// `[n, 3·P²]` fundus patch rows → `[n, D]` tokens.
    pub fn embed_fundus<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
        self.check_width(tape, patches, FUNDUS_CHANNELS)?;
        self.fundus_proj.forward(tape, store, patches)
    }

    /// `[n, P²]` OCT patch rows → `[n, D]` tokens.
    pub fn embed_oct<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
        self.check_width(tape, patches, OCT_CHANNELS)?;
        self.oct_proj.forward(tape, store, patches)
    }

    /// `[B, t]` normalized records → `[B·t, D]` table tokens, sample-major.
    pub fn embed_table<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, records: &Tensor<T>) -> Result<Var> {
        let t = self.cfg.record_fields;
        if t == 0 || records.shape().len() != 2 || records.cols() != t {
            return Err(Error::Dimension(format!(
                "records of shape {:?} do not match {t} record fields",
                records.shape()
            )));
        }
        let b = records.rows();
        let mut per_attr = Vec::with_capacity(t);
        for (i, mlp) in self.table_mlps.iter().enumerate() {
            let col: Vec<T> = records.data().chunks(t).map(|r| r[i]).collect();
            let x = tape.constant(Tensor::new([b, 1], col)?);
            per_attr.push(mlp.forward(tape, store, x)?);
        }
        // Attribute-major → sample-major.
        let stacked = tape.concat_rows(&per_attr)?;
        let order: Vec<usize> = (0..b).flat_map(|s| (0..t).map(move |i| i * b + s)).collect();
        tape.gather_rows(stacked, &order)
    }

    /// Concatenates `[fundus; oct; table]` per sample and adds the learned
    /// positional embedding to every token.
    pub fn assemble<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z_fundus: Var,
        z_oct: Var,
        z_table: Option<Var>,
        batch: usize,
    ) -> Result<TokenSequence> {
        let (n, t, d) = (self.cfg.patches_per_image(), self.cfg.record_fields, self.cfg.embed_dim);
        for (z, rows) in [(Some(z_fundus), batch * n), (Some(z_oct), batch * n), (z_table, batch * t)] {
            if let Some(z) = z {
                if tape.shape(z) != [rows, d] {
                    return Err(Error::Dimension(format!(
                        "token block of shape {:?}, expected [{rows}, {d}]",
                        tape.shape(z)
                    )));
                }
            }
        }
        if (t > 0) != z_table.is_some() {
            return Err(Error::Dimension(format!("table tokens provided inconsistently with {t} record fields")));
        }
        let mut parts = vec![z_fundus, z_oct];
        parts.extend(z_table);
        let stacked = tape.concat_rows(&parts)?;
        let mut order = Vec::with_capacity(batch * self.cfg.seq_len());
        for s in 0..batch {
            order.extend((0..n).map(|i| s * n + i));
            order.extend((0..n).map(|i| batch * n + s * n + i));
            order.extend((0..t).map(|i| 2 * batch * n + s * t + i));
        }
        let z = tape.gather_rows(stacked, &order)?;
        let pos = tape.param(store, self.pos);
        let tokens = tape.add_tiled(z, pos)?;
        Ok(TokenSequence { tokens, batch, layout: Arc::new(self.cfg.layout()) })
    }

    /// Full embedding for a batch of pre-patchified inputs.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fundus_patches: &Tensor<T>,
        oct_patches: &Tensor<T>,
        records: Option<&Tensor<T>>,
        batch: usize,
    ) -> Result<TokenSequence> {
        let fp = tape.constant(fundus_patches.clone());
        let op = tape.constant(oct_patches.clone());
        let zf = self.embed_fundus(tape, store, fp)?;
        let zo = self.embed_oct(tape, store, op)?;
        let zt = match records {
            Some(r) if self.cfg.record_fields > 0 => Some(self.embed_table(tape, store, r)?),
            _ => None,
        };
        self.assemble(tape, store, zf, zo, zt, batch)
    }
}
