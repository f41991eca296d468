//! The assembled model: embedding, selective stack, heads.

use rand::Rng;

use crate::embedding::{patchify, Mme, MmeConfig, FUNDUS_CHANNELS, OCT_CHANNELS};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadOutput};
use crate::nn::{BnUpdate, Mode, ParamStore};
use crate::selective::{PatchSource, SelectionTrace, StConfig, StStack};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mme: MmeConfig,
    pub st: StConfig,
    pub record_reconstruction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { mme: MmeConfig::default(), st: StConfig::default(), record_reconstruction: true }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mme.validate()?;
        self.st.validate()?;
        if self.mme.embed_dim != self.st.embed_dim {
            return Err(Error::Config(format!(
                "embedding width {} differs from transformer width {}",
                self.mme.embed_dim, self.st.embed_dim
            )));
        }
        Ok(())
    }
}

/// One batch in model layout. Images are stored as patch rows so both the
/// embedding and the local CNNs read from the same buffers.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub batch: usize,
    /// `[B·N, 3·P²]`
    pub fundus: Tensor<T>,
    /// `[B·N, P²]`
    pub oct: Tensor<T>,
    /// Normalized records `[B, t]`; `None` when records are not used.
    pub records: Option<Tensor<T>>,
}

impl<T: Real> ModelInput<T> {
    /// Builds a batch from `[3, H, W]` fundus and `[1, H, W]` OCT images.
    pub fn from_images(
        fundus: &[Tensor<T>],
        oct: &[Tensor<T>],
        records: Option<&[Vec<f64>]>,
        patch: usize,
    ) -> Result<Self> {
        let batch = fundus.len();
        if batch == 0 || oct.len() != batch || records.is_some_and(|r| r.len() != batch) {
            return Err(Error::Argument(format!(
                "batch needs matching non-empty image and record lists, got {batch} fundus and {} OCT",
                oct.len()
            )));
        }
        let stack = |imgs: &[Tensor<T>], channels: usize| -> Result<Tensor<T>> {
            let mut data = Vec::new();
            let mut rows = 0;
            for img in imgs {
                if img.shape()[0] != channels {
                    return Err(Error::Dimension(format!("expected {channels} channels, got {:?}", img.shape())));
                }
                let p = patchify(img, patch)?;
                rows += p.rows();
                data.extend_from_slice(p.data());
            }
            Tensor::new([rows, channels * patch * patch], data)
        };
        let fundus = stack(fundus, FUNDUS_CHANNELS)?;
        let oct = stack(oct, OCT_CHANNELS)?;
        if fundus.rows() != oct.rows() {
            return Err(Error::Dimension("fundus and OCT images differ in size".into()));
        }
        let records = match records {
            Some(r) => {
                let t = r[0].len();
                if t == 0 || r.iter().any(|row| row.len() != t) {
                    return Err(Error::Dimension("records must share one non-zero length".into()));
                }
                let flat: Vec<f64> = r.iter().flatten().copied().collect();
                Some(Tensor::from_f64([batch, t], &flat)?)
            }
            None => None,
        };
        Ok(Self { batch, fundus, oct, records })
    }
}

pub struct ForwardOutput<T> {
    pub head: HeadOutput,
    /// Final token states `[B·L, D]`.
    pub tokens: Var,
    pub traces: Vec<SelectionTrace>,
    /// Running-statistic updates to apply after a training step.
    pub bn_updates: Vec<BnUpdate<T>>,
}

#[derive(Clone, Debug)]
pub struct Msvit {
    pub cfg: ModelConfig,
    pub mme: Mme,
    pub stack: StStack,
    pub head: Head,
}

impl Msvit {
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mme = Mme::new(&cfg.mme, store, rng)?;
        let stack = StStack::new(&cfg.st, store, rng)?;
        let recon = if cfg.record_reconstruction { cfg.mme.record_fields } else { 0 };
        let head = Head::new(store, cfg.mme.embed_dim, recon, rng)?;
        Ok(Self { cfg: cfg.clone(), mme, stack, head })
    }

    /// Fresh model and parameter store from a seed.
    pub fn init<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(cfg, &mut store, rng)?;
        Ok((model, store))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &ModelInput<T>,
        mode: Mode,
    ) -> Result<ForwardOutput<T>> {
        let n = self.cfg.mme.patches_per_image();
        if input.fundus.rows() != input.batch * n || input.oct.rows() != input.batch * n {
            return Err(Error::Dimension(format!(
                "batch of {} needs {} patch rows per modality, got {} and {}",
                input.batch,
                input.batch * n,
                input.fundus.rows(),
                input.oct.rows()
            )));
        }
        let records = input.records.as_ref().filter(|_| self.cfg.mme.record_fields > 0);
        if self.cfg.mme.record_fields > 0 && records.is_none() {
            return Err(Error::Argument("model uses records but the batch has none".into()));
        }
        let seq = self.mme.forward(tape, store, &input.fundus, &input.oct, records, input.batch)?;
        let patches = PatchSource { fundus: &input.fundus, oct: &input.oct, patch: self.cfg.mme.patch_size };
        let st = self.stack.forward(tape, store, seq.tokens, &seq.layout, &patches, mode)?;
        let head = self.head.forward(tape, store, st.z, input.batch)?;
        Ok(ForwardOutput { head, tokens: st.z, traces: st.traces, bn_updates: st.bn_updates })
    }
}
