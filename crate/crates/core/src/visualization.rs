//! Selection-frequency maps: how many blocks kept each image token.

use std::path::{Path, PathBuf};

use crate::data::tsia::ResolvedSample;
use crate::data::Image;
use crate::embedding::{Modality, TokenLayout};
use crate::error::{Error, Result};
use crate::model::Msvit;
use crate::nn::ParamStore;
use crate::selective::SelectionTrace;
use crate::train::{predict, Float};

/// Per-modality grids of selection counts, row-major. Values are integral
/// for a single sample and real-valued for batch means.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMap {
    pub grid: usize,
    /// Number of blocks M; every value lies in `[0, M]`.
    pub blocks: usize,
    pub fundus: Vec<f64>,
    pub oct: Vec<f64>,
    /// Table tokens take part in every block, so each entry is M.
    pub table: Vec<f64>,
}

impl FrequencyMap {
    pub fn cells(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Fundus => &self.fundus,
            Modality::Oct => &self.oct,
            Modality::Table => &self.table,
        }
    }

    pub fn at(&self, modality: Modality, row: usize, col: usize) -> f64 {
        self.cells(modality)[row * self.grid + col]
    }

    /// Mean over the listed `(row, col)` cells; `None` when the list is empty.
    pub fn cell_mean(&self, modality: Modality, cells: &[(usize, usize)]) -> Option<f64> {
        if cells.is_empty() {
            return None;
        }
        Some(cells.iter().map(|&(r, c)| self.at(modality, r, c)).sum::<f64>() / cells.len() as f64)
    }
}

/// `f_i = Σ_m 1[i ∈ trace[m]]`, placed on each modality's patch grid.
pub fn accumulate(trace: &SelectionTrace, layout: &TokenLayout) -> Result<FrequencyMap> {
    if trace.n_image != layout.image_tokens() {
        return Err(Error::Dimension(format!(
            "trace covers {} image tokens, layout has {}",
            trace.n_image,
            layout.image_tokens()
        )));
    }
    let per = layout.patches_per_image();
    let mut fm = FrequencyMap {
        grid: layout.grid,
        blocks: trace.len(),
        fundus: vec![0.0; per],
        oct: vec![0.0; per],
        table: vec![trace.len() as f64; layout.table_tokens()],
    };
    for (i, &f) in trace.frequencies().iter().enumerate() {
        let (r, c) = layout.coords[i].expect("image token");
        let cell = r * layout.grid + c;
        match layout.tags[i] {
            Modality::Fundus => fm.fundus[cell] = f as f64,
            Modality::Oct => fm.oct[cell] = f as f64,
            Modality::Table => unreachable!("table tokens are not traced"),
        }
    }
    Ok(fm)
}

/// Cellwise mean of maps sharing one grid and block count.
pub fn mean_map(maps: &[FrequencyMap]) -> Result<FrequencyMap> {
    let first = maps.first().ok_or_else(|| Error::Argument("no maps to average".into()))?;
    let mut out = first.clone();
    for m in &maps[1..] {
        if m.grid != first.grid || m.blocks != first.blocks || m.table.len() != first.table.len() {
            return Err(Error::Dimension("maps differ in grid, depth or table size".into()));
        }
        for (dst, src) in [(&mut out.fundus, &m.fundus), (&mut out.oct, &m.oct), (&mut out.table, &m.table)] {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
    let n = maps.len() as f64;
    for v in [&mut out.fundus, &mut out.oct, &mut out.table] {
        v.iter_mut().for_each(|a| *a /= n);
    }
    Ok(out)
}

/// Eval-mode selection maps for each sample.
pub fn sample_maps(model: &Msvit, store: &ParamStore<Float>, samples: &[ResolvedSample], batch_size: usize) -> Result<Vec<FrequencyMap>> {
    let layout = model.cfg.mme.layout();
    predict(model, store, samples, batch_size)?.traces.iter().map(|t| accumulate(t, &layout)).collect()
}

/// Mean of the per-sample maps of a batch.
pub fn batch_mean_map(model: &Msvit, store: &ParamStore<Float>, samples: &[ResolvedSample], batch_size: usize) -> Result<FrequencyMap> {
    mean_map(&sample_maps(model, store, samples, batch_size)?)
}

/// `round(255 · f / M)` with halves rounded up.
pub fn quantize(f: f64, blocks: usize) -> u8 {
    if blocks == 0 {
        return 0;
    }
    (255.0 * f / blocks as f64 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Grayscale heatmap with each token expanded to `scale_px` square pixels.
pub fn render(fm: &FrequencyMap, modality: Modality, scale_px: usize) -> Result<Image> {
    if modality == Modality::Table || scale_px == 0 {
        return Err(Error::Argument("render needs an image modality and a positive scale".into()));
    }
    let side = fm.grid * scale_px;
    let mut img = Image::zeros(1, side, side);
    for r in 0..fm.grid {
        for c in 0..fm.grid {
            let v = quantize(fm.at(modality, r, c), fm.blocks);
            for y in r * scale_px..(r + 1) * scale_px {
                for x in c * scale_px..(c + 1) * scale_px {
                    img.set(0, y, x, v);
                }
            }
        }
    }
    Ok(img)
}

/// Writes `<id>.fundus.freq.pgm` and `<id>.oct.freq.pgm` into `dir`.
pub fn write_maps(fm: &FrequencyMap, id: &str, dir: &Path, scale_px: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    [Modality::Fundus, Modality::Oct]
        .into_iter()
        .map(|m| {
            let path = dir.join(format!("{id}.{}.freq.pgm", m.name()));
            render(fm, m, scale_px)?.write(&path)?;
            Ok(path)
        })
        .collect()
}
