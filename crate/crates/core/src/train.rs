//! Optimizer, learning-rate schedule, cross-validation and ablation sweeps.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::tsia::{augment_train, mask_modality, resolve_eval, resolve_plain, tsia_resolve, DonorPool, MaskMode, ResolvedSample};
use crate::data::{Dataset, RECORD_FIELDS};
use crate::error::{Error, Result};
use crate::heads::{total_loss, DEFAULT_ALPHA};
use crate::model::{ModelConfig, ModelInput, Msvit};
use crate::nn::{Mode, ParamStore};
use crate::selective::SelectionTrace;
use crate::tensor::{Real, Tape, Tensor};

/// Element type used for training runs.
pub type Float = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub selection_rate: f64,
    pub tsia: bool,
    pub record_info: bool,
    pub record_reconstruction: bool,
    pub st_enabled: bool,
    pub mask_mode: MaskMode,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            base_lr: 0.001,
            alpha: DEFAULT_ALPHA,
            batch_size: 16,
            selection_rate: 0.5,
            tsia: true,
            record_info: true,
            record_reconstruction: true,
            st_enabled: true,
            mask_mode: MaskMode::None,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.folds < 3 {
            return Err(Error::Config(format!("need at least 3 folds for train/val/test, got {}", self.folds)));
        }
        if !(self.selection_rate > 0.0 && self.selection_rate <= 1.0) {
            return Err(Error::Config(format!("selection_rate must be in (0, 1], got {}", self.selection_rate)));
        }
        Ok(())
    }

    /// Architecture with this run's flags applied.
    pub fn model_config(&self, arch: &ModelConfig) -> ModelConfig {
        let mut cfg = arch.clone();
        cfg.st.selection_rate = self.selection_rate;
        cfg.st.enabled = self.st_enabled;
        cfg.mme.record_fields = if self.record_info { RECORD_FIELDS } else { 0 };
        cfg.record_reconstruction = self.record_info && self.record_reconstruction;
        cfg
    }
}

/// `0.5 · base_lr · (1 + cos(π · epoch / epochs))`.
pub fn cosine_lr(epoch: usize, epochs: usize, base_lr: f64) -> f64 {
    let t = (epoch.min(epochs) as f64) / epochs.max(1) as f64;
    (0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}

/// Adam over the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(()), v: zeros(()) }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::real(self.beta1), T::real(self.beta2));
        let c1 = T::real(1.0 - self.beta1.powi(t));
        let c2 = T::real(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::real(lr), T::real(self.eps));
        for (i, (_, p)) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                w[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[usize], labels: &[usize]) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Dimension(format!("{} predictions for {} labels", preds.len(), labels.len())));
        }
        let mut c = Confusion::default();
        for (&p, &y) in preds.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => return Err(Error::Argument(format!("binary classes expected, got prediction {p} label {y}"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f_score: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl GeneMetrics {
    pub const NAMES: [&'static str; 5] = ["accuracy", "precision", "recall", "specificity", "f_score"];

    /// Undefined ratios (empty denominators) are reported as 0.
    pub fn from_confusion(c: &Confusion) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f_score = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            specificity: ratio(c.tn, c.tn + c.fp),
            f_score,
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.specificity, self.f_score]
    }

    fn mean(items: &[GeneMetrics]) -> Self {
        let n = items.len().max(1) as f64;
        let s = |f: fn(&GeneMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            accuracy: s(|m| m.accuracy),
            precision: s(|m| m.precision),
            recall: s(|m| m.recall),
            specificity: s(|m| m.specificity),
            f_score: s(|m| m.f_score),
        }
    }
}

pub fn compute_metrics(preds: &[usize], labels: &[usize]) -> Result<GeneMetrics> {
    Ok(GeneMetrics::from_confusion(&Confusion::from_predictions(preds, labels)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub arms2: GeneMetrics,
    pub cfh: GeneMetrics,
}

impl MetricsReport {
    pub fn mean_accuracy(&self) -> f64 {
        0.5 * (self.arms2.accuracy + self.cfh.accuracy)
    }

    pub fn mean(items: &[MetricsReport]) -> Self {
        let a: Vec<_> = items.iter().map(|r| r.arms2).collect();
        let c: Vec<_> = items.iter().map(|r| r.cfh).collect();
        Self { arms2: GeneMetrics::mean(&a), cfh: GeneMetrics::mean(&c) }
    }

    pub fn genes(&self) -> [(&'static str, &GeneMetrics); 2] {
        [("arms2", &self.arms2), ("cfh", &self.cfh)]
    }
}

/// Patient-level split of one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    fn check_disjoint(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Argument(format!("patient index {i} appears twice or is out of range")));
            }
        }
        if self.train.is_empty() || self.val.is_empty() || self.test.is_empty() {
            return Err(Error::Config("every split of a fold must be non-empty".into()));
        }
        Ok(())
    }
}

/// Shuffles patient indices with `seed` into `k` groups. Fold `f` tests on
/// group `f`, validates on group `f + 1` and trains on the rest.
pub fn fold_splits(n: usize, k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 3 || n < k {
        return Err(Error::Config(format!("cannot split {n} patients into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f01d));
    let groups: Vec<Vec<usize>> = (0..k).map(|g| order.iter().skip(g).step_by(k).copied().collect()).collect();
    let splits: Vec<Split> = (0..k)
        .map(|f| {
            let v = (f + 1) % k;
            let mut train: Vec<usize> = (0..k).filter(|&g| g != f && g != v).flat_map(|g| groups[g].clone()).collect();
            train.sort_unstable();
            let mut val = groups[v].clone();
            val.sort_unstable();
            let mut test = groups[f].clone();
            test.sort_unstable();
            Split { train, val, test }
        })
        .collect();
    for s in &splits {
        s.check_disjoint(n)?;
    }
    Ok(splits)
}

/// Batch tensors for a list of resolved samples.
pub fn build_input<T: Real>(samples: &[&ResolvedSample], cfg: &ModelConfig) -> Result<ModelInput<T>> {
    let fundus: Vec<Tensor<T>> = samples.iter().map(|s| s.fundus.to_tensor()).collect();
    let oct: Vec<Tensor<T>> = samples.iter().map(|s| s.oct.to_tensor()).collect();
    let records: Option<Vec<Vec<f64>>> =
        (cfg.mme.record_fields > 0).then(|| samples.iter().map(|s| s.record[..cfg.mme.record_fields].to_vec()).collect());
    ModelInput::from_images(&fundus, &oct, records.as_deref(), cfg.mme.patch_size)
}

#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub arms2: Vec<usize>,
    pub cfh: Vec<usize>,
    pub traces: Vec<SelectionTrace>,
}

fn argmax_rows(t: &Tensor<Float>) -> Vec<usize> {
    t.data().chunks(t.cols()).map(|r| usize::from(r[1] > r[0])).collect()
}

/// Eval-mode predictions, in sample order.
pub fn predict(model: &Msvit, store: &ParamStore<Float>, samples: &[ResolvedSample], batch_size: usize) -> Result<Predictions> {
    let mut out = Predictions::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ResolvedSample> = chunk.iter().collect();
        let input = build_input(&refs, &model.cfg)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, store, &input, Mode::Eval)?;
        out.arms2.extend(argmax_rows(tape.value(fwd.head.logits_arms2)));
        out.cfh.extend(argmax_rows(tape.value(fwd.head.logits_cfh)));
        out.traces.extend(fwd.traces);
    }
    Ok(out)
}

pub fn evaluate(model: &Msvit, store: &ParamStore<Float>, samples: &[ResolvedSample], batch_size: usize) -> Result<MetricsReport> {
    let p = predict(model, store, samples, batch_size)?;
    let ya: Vec<usize> = samples.iter().map(|s| s.label_arms2).collect();
    let yc: Vec<usize> = samples.iter().map(|s| s.label_cfh).collect();
    Ok(MetricsReport { arms2: compute_metrics(&p.arms2, &ya)?, cfh: compute_metrics(&p.cfh, &yc)? })
}

/// Evaluation samples for the given patients under `mask`.
pub fn eval_samples(ds: &Dataset, idx: &[usize], mask: MaskMode) -> Vec<ResolvedSample> {
    idx.iter().map(|&i| mask_modality(resolve_eval(&ds.patients[i], ds.image_size), mask)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct FoldResult {
    pub fold: usize,
    pub split: Split,
    pub report: MetricsReport,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub model: Msvit,
    /// Parameters of the selected checkpoint.
    pub store: ParamStore<Float>,
    /// Ids of donor-pool members whose data was read during training.
    pub consulted: Vec<String>,
}

fn fold_seed(seed: u64, fold: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((fold as u64) << 32) ^ stream
}

/// Trains on `split.train`, keeps the epoch with the best validation mean
/// accuracy (earliest on ties) and reports test metrics for it.
pub fn run_fold(
    ds: &Dataset,
    arch: &ModelConfig,
    cfg: &TrainConfig,
    fold: usize,
    split: &Split,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<FoldResult> {
    cfg.validate()?;
    split.check_disjoint(ds.len())?;
    let mcfg = cfg.model_config(arch);
    if mcfg.mme.image_size != ds.image_size {
        return Err(Error::Config(format!(
            "model image size {} differs from dataset image size {}",
            mcfg.mme.image_size, ds.image_size
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(fold_seed(cfg.seed, fold, 1));
    let (model, mut store) = Msvit::init::<Float, _>(&mcfg, &mut init_rng)?;
    let mut adam = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(cfg.seed, fold, 2));

    let pool = DonorPool::new(split.train.iter().map(|&i| &ds.patients[i]).collect());
    let val = eval_samples(ds, &split.val, cfg.mask_mode);
    let mut best: Option<(f64, usize, ParamStore<Float>)> = None;
    let mut order = split.train.clone();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<ResolvedSample> = chunk
                .iter()
                .map(|&i| {
                    let p = &ds.patients[i];
                    let s = if cfg.tsia {
                        tsia_resolve(p, &pool, ds.image_size, &mut rng)
                    } else {
                        resolve_plain(p, ds.image_size, &mut rng)
                    };
                    mask_modality(augment_train(s, &mut rng), cfg.mask_mode)
                })
                .collect();
            let refs: Vec<&ResolvedSample> = samples.iter().collect();
            let input = build_input::<Float>(&refs, &mcfg)?;
            let ya: Vec<usize> = samples.iter().map(|s| s.label_arms2).collect();
            let yc: Vec<usize> = samples.iter().map(|s| s.label_cfh).collect();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &store, &input, Mode::Train)?;
            let loss = total_loss(&mut tape, &fwd.head, &ya, &yc, input.records.as_ref(), cfg.alpha)?;
            tape.backward(loss.var)?;
            store.zero_grad();
            store.accumulate_grads(&tape);
            adam.step(&mut store, lr);
            for u in &fwd.bn_updates {
                u.apply(&mut store);
            }
            loss_sum += loss.total * chunk.len() as f64;
        }
        let val_accuracy = evaluate(&model, &store, &val, cfg.batch_size)?.mean_accuracy();
        if best.as_ref().map_or(true, |b| val_accuracy > b.0) {
            best = Some((val_accuracy, epoch, store.clone()));
        }
        progress(&EpochStats { fold, epoch, lr, train_loss: loss_sum / order.len() as f64, val_accuracy });
    }

    let consulted = pool.consulted();
    let train_ids: BTreeSet<&str> = split.train.iter().map(|&i| ds.patients[i].id.as_str()).collect();
    if let Some(leak) = consulted.iter().find(|id| !train_ids.contains(id.as_str())) {
        return Err(Error::Argument(format!("donor pool consulted non-training patient {leak}")));
    }
    let (best_val_accuracy, best_epoch, store) = best.expect("at least one epoch");
    let test = eval_samples(ds, &split.test, cfg.mask_mode);
    let report = evaluate(&model, &store, &test, cfg.batch_size)?;
    Ok(FoldResult { fold, split: split.clone(), report, best_epoch, best_val_accuracy, model, store, consulted })
}

pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub mean: MetricsReport,
}

/// Runs the listed folds (all folds when `which` is `None`).
pub fn cross_validate(
    ds: &Dataset,
    arch: &ModelConfig,
    cfg: &TrainConfig,
    which: Option<&[usize]>,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<CvResult> {
    cfg.validate()?;
    let splits = fold_splits(ds.len(), cfg.folds, cfg.seed)?;
    let all: Vec<usize> = (0..cfg.folds).collect();
    let which = which.unwrap_or(&all);
    let mut folds = Vec::new();
    for &f in which {
        let split = splits.get(f).ok_or_else(|| Error::Config(format!("fold {f} is out of range")))?;
        folds.push(run_fold(ds, arch, cfg, f, split, progress)?);
    }
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report).collect();
    Ok(CvResult { mean: MetricsReport::mean(&reports), folds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    SelectionRate,
    Tsia,
    Record,
    St,
    Mask,
}

impl Axis {
    pub const SELECTION_RATES: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

    /// Row labels and the configs they run.
    pub fn variants(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Axis::SelectionRate => Self::SELECTION_RATES
                .iter()
                .map(|&s| (format!("selection_rate={s}"), with(&|c| c.selection_rate = s)))
                .collect(),
            Axis::Tsia => vec![
                ("without_tsia".into(), with(&|c| c.tsia = false)),
                ("with_tsia".into(), with(&|c| c.tsia = true)),
            ],
            Axis::Record => vec![
                ("without_info".into(), with(&|c| c.record_info = false)),
                (
                    "with_info".into(),
                    with(&|c| {
                        c.record_info = true;
                        c.record_reconstruction = false
                    }),
                ),
                (
                    "with_info+reconstruction".into(),
                    with(&|c| {
                        c.record_info = true;
                        c.record_reconstruction = true
                    }),
                ),
            ],
            Axis::St => vec![
                ("without_st".into(), with(&|c| c.st_enabled = false)),
                ("with_st".into(), with(&|c| c.st_enabled = true)),
            ],
            Axis::Mask => MaskMode::ALL.iter().map(|&m| (m.to_string(), with(&|c| c.mask_mode = m))).collect(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::SelectionRate => "selection_rate",
            Axis::Tsia => "tsia",
            Axis::Record => "record",
            Axis::St => "st",
            Axis::Mask => "mask",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selection_rate" => Ok(Axis::SelectionRate),
            "tsia" => Ok(Axis::Tsia),
            "record" => Ok(Axis::Record),
            "st" => Ok(Axis::St),
            "mask" => Ok(Axis::Mask),
            _ => Err(Error::Config(format!("unknown ablation axis {s:?}"))),
        }
    }
}

pub struct SweepRow {
    pub label: String,
    pub config: TrainConfig,
    pub report: MetricsReport,
}

pub fn ablation_sweep(
    ds: &Dataset,
    arch: &ModelConfig,
    base: &TrainConfig,
    axis: Axis,
    which: Option<&[usize]>,
    progress: &mut dyn FnMut(&str, &EpochStats),
) -> Result<Vec<SweepRow>> {
    axis.variants(base)
        .into_iter()
        .map(|(label, config)| {
            let cv = cross_validate(ds, arch, &config, which, &mut |e| progress(&label, e))?;
            Ok(SweepRow { label, config, report: cv.mean })
        })
        .collect()
}

pub const TABLE_HEADER: &str = "Method\tAccuracy\tPrecision\tRecall\tSpecificity\tF-score";

/// One table per gene, one row per labelled report.
pub fn format_table(rows: &[(String, MetricsReport)], gene: &str) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for (label, r) in rows {
        let m = if gene == "cfh" { &r.cfh } else { &r.arms2 };
        let _ = write!(out, "{label}");
        for v in m.values() {
            let _ = write!(out, "\t{v:.4}");
        }
        out.push('\n');
    }
    out
}

/// `label.gene.metric = value` lines with full precision.
pub fn format_key_values(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::new();
    for (label, r) in rows {
        for (gene, m) in r.genes() {
            for (name, v) in GeneMetrics::NAMES.iter().zip(m.values()) {
                let _ = writeln!(out, "{label}.{gene}.{name} = {v}");
            }
        }
    }
    out
}

/// Inverse of [`format_key_values`].
pub fn parse_key_values(text: &str) -> Result<Vec<(String, MetricsReport)>> {
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let bad = || Error::Argument(format!("malformed metrics line {line:?}"));
        let (key, value) = line.split_once(" = ").ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        let mut parts = key.rsplitn(3, '.');
        let (metric, gene, label) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
        if rows.last().map_or(true, |r| r.0 != label) {
            rows.push((label.to_string(), MetricsReport::default()));
        }
        let r = &mut rows.last_mut().expect("pushed").1;
        let m = match gene {
            "arms2" => &mut r.arms2,
            "cfh" => &mut r.cfh,
            _ => return Err(bad()),
        };
        match metric {
            "accuracy" => m.accuracy = value,
            "precision" => m.precision = value,
            "recall" => m.recall = value,
            "specificity" => m.specificity = value,
            "f_score" => m.f_score = value,
            _ => return Err(bad()),
        }
    }
    Ok(rows)
}
