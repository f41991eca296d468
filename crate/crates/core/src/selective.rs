//! Selective transformer blocks: score image tokens, attend over the top-k
//! plus the table tokens, fuse CNN features of the selected source patches.

use rand::Rng;

use crate::embedding::{Modality, TokenLayout, FUNDUS_CHANNELS, OCT_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm, BnUpdate, Conv3x3, LayerNorm, Linear, Mlp2, Mode, ParamStore};
use crate::tensor::{top_k_indices, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct StConfig {
    pub blocks: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub local_dim: usize,
    pub selection_rate: f64,
    pub gradient_coupling: bool,
    /// When false every block is a plain dense transformer block with no
    /// selection and no local branch.
    pub enabled: bool,
    /// Hidden width multiplier of the feed-forward and channel MLPs.
    pub mlp_ratio: usize,
    pub selector_hidden: usize,
}

impl Default for StConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            heads: 4,
            embed_dim: 64,
            local_dim: 32,
            selection_rate: 0.5,
            gradient_coupling: true,
            enabled: true,
            mlp_ratio: 2,
            selector_hidden: 32,
        }
    }
}

impl StConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("at least one transformer block is required".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(self.selection_rate > 0.0 && self.selection_rate <= 1.0) {
            return Err(Error::Config(format!("selection rate {} is outside (0, 1]", self.selection_rate)));
        }
        if self.local_dim == 0 || self.mlp_ratio == 0 || self.selector_hidden == 0 {
            return Err(Error::Config("local dim, mlp ratio and selector width must be positive".into()));
        }
        Ok(())
    }
}

/// `k = max(1, round(s·n))`, capped at `n`.
pub fn select_count(n_image: usize, rate: f64) -> usize {
    ((rate * n_image as f64).round() as usize).clamp(1, n_image.max(1))
}

/// Indices (ascending) of the `k` highest probabilities, ties to the lower index.
pub fn select<T: Real>(p: &[T], rate: f64) -> Result<Vec<usize>> {
    top_k_indices(p, select_count(p.len(), rate))
}

/// Which image tokens each block selected for one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionTrace {
    pub n_image: usize,
    pub blocks: Vec<Vec<usize>>,
}

impl SelectionTrace {
    pub fn new(n_image: usize) -> Self {
        Self { n_image, blocks: Vec::new() }
    }

    pub fn push(&mut self, selected: Vec<usize>) -> Result<()> {
        if selected.windows(2).any(|w| w[0] >= w[1]) || selected.iter().any(|&i| i >= self.n_image) {
            return Err(Error::Argument(format!(
                "selection {selected:?} is not an ascending subset of {} image tokens",
                self.n_image
            )));
        }
        self.blocks.push(selected);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Per-token count of blocks that selected it, each in `0..=M`.
    pub fn frequencies(&self) -> Vec<u32> {
        let mut f = vec![0u32; self.n_image];
        for sel in &self.blocks {
            for &i in sel {
                f[i] += 1;
            }
        }
        f
    }
}

/// Flattened source patches for a batch: fundus rows `[B·N, 3·P²]` and OCT
/// rows `[B·N, P²]`, each row laid out as `[C, P, P]`.
#[derive(Clone, Copy, Debug)]
pub struct PatchSource<'a, T> {
    pub fundus: &'a Tensor<T>,
    pub oct: &'a Tensor<T>,
    pub patch: usize,
}

/// conv3x3 → batchnorm → ReLU → global average pool.
#[derive(Clone, Debug)]
pub struct LocalCnn {
    pub conv: Conv3x3,
    pub bn: BatchNorm,
    pub channels: usize,
}

impl LocalCnn {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv3x3::new(store, &format!("{name}.conv"), channels, out, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out)?,
            channels,
        })
    }

    /// `[n, C, P, P]` → `[n, D_local]`. A training batch with fewer than two
    /// patches falls back to the running statistics.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        patches: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BnUpdate<T>>)> {
        let h = self.conv.forward(tape, store, patches)?;
        let mode = if tape.shape(patches)[0] < 2 { Mode::Eval } else { mode };
        let (h, update) = self.bn.forward(tape, store, h, mode)?;
        let h = tape.relu(h);
        Ok((tape.global_avg_pool(h)?, update))
    }
}

/// Selection, local feature and fusion parameters, absent in dense blocks.
#[derive(Clone, Debug)]
pub struct SelectBranch {
    pub selector: Mlp2,
    pub cnn_fundus: LocalCnn,
    pub cnn_oct: LocalCnn,
    pub fuse: Mlp2,
}

#[derive(Clone, Debug)]
pub struct StBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp2,
    pub branch: Option<SelectBranch>,
}

pub struct BlockOutput<T> {
    pub z: Var,
    /// Selected image-token indices per sample.
    pub selected: Vec<Vec<usize>>,
    /// Selection probabilities `[B·N_img, 1]`, when selection is enabled.
    pub probs: Option<Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl StBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        cfg: &StConfig,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let hid = cfg.mlp_ratio * d;
        let branch = if cfg.enabled {
            Some(SelectBranch {
                selector: Mlp2::new(store, &format!("{name}.select"), (d, cfg.selector_hidden, 1), Activation::Relu, rng)?,
                cnn_fundus: LocalCnn::new(store, &format!("{name}.local.fundus"), FUNDUS_CHANNELS, cfg.local_dim, rng)?,
                cnn_oct: LocalCnn::new(store, &format!("{name}.local.oct"), OCT_CHANNELS, cfg.local_dim, rng)?,
                fuse: Mlp2::new(store, &format!("{name}.fuse"), (d + cfg.local_dim, hid, d), Activation::Gelu, rng)?,
            })
        } else {
            None
        };
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ffn: Mlp2::new(store, &format!("{name}.ffn"), (d, hid, d), Activation::Gelu, rng)?,
            branch,
        })
    }

    fn branch(&self) -> Result<&SelectBranch> {
        self.branch
            .as_ref()
            .ok_or_else(|| Error::Config("block was built without the selection branch".into()))
    }

    /// Sigmoid selection probabilities `[n, 1]` for image-token rows `[n, D]`.
    pub fn selection_scores<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, u_img: Var) -> Result<Var> {
        let logits = self.branch()?.selector.forward(tape, store, u_img)?;
        Ok(tape.sigmoid(logits))
    }

    /// Attention sub-layer with residual: multi-head attention among each
    /// sample's selected image tokens and all its table tokens; every other
    /// row of `z` is returned unchanged. `u` is the normalized `z`. With
    /// `gate = Some(p)` each selected token's value row is scaled by
    /// `p / detach(p)`.
    pub fn selective_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        heads: usize,
        z: Var,
        u: Var,
        layout: &TokenLayout,
        selected: &[Vec<usize>],
        gate: Option<Var>,
    ) -> Result<Var> {
        let (l, n_img) = (layout.len(), layout.image_tokens());
        let mut rows = Vec::new();
        let mut groups = Vec::with_capacity(selected.len());
        let mut gated = Vec::new();
        let mut gate_src = Vec::new();
        for (b, sel) in selected.iter().enumerate() {
            for &i in sel {
                gated.push(rows.len());
                gate_src.push(b * n_img + i);
                rows.push(b * l + i);
            }
            rows.extend((n_img..l).map(|i| b * l + i));
            groups.push(sel.len() + l - n_img);
        }
        if groups.contains(&0) {
            return Err(Error::Argument("a sample has no participating tokens".into()));
        }
        let dense = rows.len() == tape.value(z).rows();
        let up = if dense { u } else { tape.gather_rows(u, &rows)? };
        let q = self.q.forward(tape, store, up)?;
        let k = self.k.forward(tape, store, up)?;
        let mut v = self.v.forward(tape, store, up)?;
        if let (Some(p), false) = (gate, gated.is_empty()) {
            let ps = tape.gather_rows(p, &gate_src)?;
            let fixed = tape.detach(ps);
            let ratio = tape.div(ps, fixed)?;
            v = tape.gate_rows(v, ratio, &gated)?;
        }
        let a = tape.attention(q, k, v, &groups, heads)?;
        let o = self.proj.forward(tape, store, a)?;
        if dense {
            tape.add(z, o)
        } else {
            tape.index_add(z, o, &rows)
        }
    }

    /// CNN features `[B·N_img, D_local]` of each selected token's source
    /// patch; rows of unselected tokens are zero.
    pub fn local_features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layout: &TokenLayout,
        selected: &[Vec<usize>],
        patches: &PatchSource<'_, T>,
        mode: Mode,
    ) -> Result<(Var, Vec<BnUpdate<T>>)> {
        let branch = self.branch()?;
        let (n, n_img) = (layout.patches_per_image(), layout.image_tokens());
        let local_dim = store.get(branch.cnn_fundus.bn.gamma).value.len();
        let mut out = tape.constant(Tensor::zeros([selected.len() * n_img, local_dim]));
        let mut updates = Vec::new();
        for (modality, cnn, src) in [
            (Modality::Fundus, &branch.cnn_fundus, patches.fundus),
            (Modality::Oct, &branch.cnn_oct, patches.oct),
        ] {
            let width = src.cols();
            let mut data = Vec::new();
            let mut dst = Vec::new();
            for (b, sel) in selected.iter().enumerate() {
                for &i in sel {
                    let tag = *layout.tags.get(i).expect("selected index outside the token layout");
                    if tag != modality {
                        continue;
                    }
                    let r = b * n + i % n;
                    data.extend_from_slice(&src.data()[r * width..(r + 1) * width]);
                    dst.push(b * n_img + i);
                }
            }
            if dst.is_empty() {
                continue;
            }
            let x = tape.constant(Tensor::new([dst.len(), cnn.channels, patches.patch, patches.patch], data)?);
            let (feat, update) = cnn.forward(tape, store, x, mode)?;
            updates.extend(update);
            out = tape.index_add(out, feat, &dst)?;
        }
        Ok((out, updates))
    }

    /// Shared channel MLP over `[z_global; z_local]`, with a zero local slot
    /// for table tokens. Returns the MLP output `[B·L, D]`.
    pub fn fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layout: &TokenLayout,
        z: Var,
        z_local: Var,
    ) -> Result<Var> {
        let branch = self.branch()?;
        let (l, n_img) = (layout.len(), layout.image_tokens());
        let rows_total = tape.value(z).rows();
        let batch = rows_total / l;
        let padded = if l == n_img {
            z_local
        } else {
            let zeros = tape.constant(Tensor::zeros([rows_total, tape.value(z_local).cols()]));
            let dst: Vec<usize> = (0..batch).flat_map(|b| (0..n_img).map(move |i| b * l + i)).collect();
            tape.index_add(zeros, z_local, &dst)?
        };
        let cat = tape.concat_cols(&[z, padded])?;
        branch.fuse.forward(tape, store, cat)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &StConfig,
        z: Var,
        layout: &TokenLayout,
        patches: &PatchSource<'_, T>,
        mode: Mode,
    ) -> Result<BlockOutput<T>> {
        let (l, n_img) = (layout.len(), layout.image_tokens());
        let rows = tape.value(z).rows();
        if rows % l != 0 || tape.value(z).cols() != cfg.embed_dim {
            return Err(Error::Dimension(format!(
                "block input {:?} does not tile sequences of length {l}",
                tape.shape(z)
            )));
        }
        let batch = rows / l;
        let u = self.ln1.forward(tape, store, z)?;

        let (selected, probs) = if self.branch.is_some() {
            let img_rows: Vec<usize> = (0..batch).flat_map(|b| (0..n_img).map(move |i| b * l + i)).collect();
            let u_img = tape.gather_rows(u, &img_rows)?;
            let p = self.selection_scores(tape, store, u_img)?;
            let pv = tape.value(p).data();
            let selected = pv
                .chunks(n_img)
                .map(|ps| select(ps, cfg.selection_rate))
                .collect::<Result<Vec<_>>>()?;
            (selected, Some(p))
        } else {
            (vec![(0..n_img).collect(); batch], None)
        };

        let gate = if cfg.gradient_coupling { probs } else { None };
        let mut z = self.selective_attention(tape, store, cfg.heads, z, u, layout, &selected, gate)?;

        let mut bn_updates = Vec::new();
        if self.branch.is_some() {
            let (mut z_local, updates) = self.local_features(tape, store, layout, &selected, patches, mode)?;
            bn_updates = updates;
            if let Some(p) = gate {
                // unselected rows are zero, so gating every row only touches selected ones
                let fixed = tape.detach(p);
                let ratio = tape.div(p, fixed)?;
                let all: Vec<usize> = (0..tape.value(p).rows()).collect();
                z_local = tape.gate_rows(z_local, ratio, &all)?;
            }
            let f = self.fuse(tape, store, layout, z, z_local)?;
            z = tape.add(z, f)?;
        }

        let u2 = self.ln2.forward(tape, store, z)?;
        let f = self.ffn.forward(tape, store, u2)?;
        let z = tape.add(z, f)?;
        Ok(BlockOutput { z, selected, probs, bn_updates })
    }
}

/// M blocks applied in sequence.
#[derive(Clone, Debug)]
pub struct StStack {
    pub cfg: StConfig,
    pub blocks: Vec<StBlock>,
}

pub struct StackOutput<T> {
    pub z: Var,
    /// One trace per sample.
    pub traces: Vec<SelectionTrace>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl StStack {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &StConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|m| StBlock::new(cfg, store, &format!("st.{m}"), rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), blocks })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
        layout: &TokenLayout,
        patches: &PatchSource<'_, T>,
        mode: Mode,
    ) -> Result<StackOutput<T>> {
        let batch = tape.value(z).rows() / layout.len().max(1);
        let mut traces = vec![SelectionTrace::new(layout.image_tokens()); batch];
        let mut bn_updates = Vec::new();
        let mut z = z;
        for block in &self.blocks {
            let out = block.forward(tape, store, &self.cfg, z, layout, patches, mode)?;
            for (trace, sel) in traces.iter_mut().zip(out.selected) {
                trace.push(sel)?;
            }
            bn_updates.extend(out.bn_updates);
            z = out.z;
        }
        Ok(StackOutput { z, traces, bn_updates })
    }
}
