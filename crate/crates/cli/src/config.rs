//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msvit::data::synth::SynthConfig;
use msvit::data::tsia::MaskMode;
use msvit::model::ModelConfig;
use msvit::train::{Axis, TrainConfig};
use msvit::{Error, Result};

/// Everything a command needs. Defaults are the full-scale settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Manifest of the dataset to train on.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Folds to run; `None` runs all of them.
    pub run_folds: Option<Vec<usize>>,
    /// Fold whose test split `eval` and `visualize` use.
    pub fold: usize,
    pub checkpoint: Option<PathBuf>,
    /// Sample ids to visualize; empty means the fold's whole test split.
    pub samples: Vec<String>,
    pub scale_px: usize,
    pub axis: Option<Axis>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data: None,
            out: PathBuf::from("out"),
            run_folds: None,
            fold: 0,
            checkpoint: None,
            samples: Vec::new(),
            scale_px: 8,
            axis: None,
        }
    }
}

/// Every accepted key, in the order the effective config is written.
pub const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "embed_dim",
    "blocks",
    "heads",
    "local_dim",
    "selector_hidden",
    "mlp_ratio",
    "gradient_coupling",
    "epochs",
    "base_lr",
    "alpha",
    "batch_size",
    "selection_rate",
    "tsia",
    "record_info",
    "record_reconstruction",
    "st_enabled",
    "mask_mode",
    "folds",
    "seed",
    "sets",
    "oct_fraction",
    "missing_fundus_fraction",
    "max_oct",
    "data",
    "out",
    "run_folds",
    "fold",
    "checkpoint",
    "samples",
    "scale_px",
    "axis",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "image_size" => {
                self.arch.mme.image_size = parse(key, v)?;
                self.synth.image_size = self.arch.mme.image_size;
            }
            "patch_size" => self.arch.mme.patch_size = parse(key, v)?,
            "embed_dim" => {
                self.arch.mme.embed_dim = parse(key, v)?;
                self.arch.st.embed_dim = self.arch.mme.embed_dim;
            }
            "blocks" => self.arch.st.blocks = parse(key, v)?,
            "heads" => self.arch.st.heads = parse(key, v)?,
            "local_dim" => self.arch.st.local_dim = parse(key, v)?,
            "selector_hidden" => self.arch.st.selector_hidden = parse(key, v)?,
            "mlp_ratio" => self.arch.st.mlp_ratio = parse(key, v)?,
            "gradient_coupling" => self.arch.st.gradient_coupling = parse_bool(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "base_lr" => self.train.base_lr = parse(key, v)?,
            "alpha" => self.train.alpha = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "selection_rate" => self.train.selection_rate = parse(key, v)?,
            "tsia" => self.train.tsia = parse_bool(key, v)?,
            "record_info" => self.train.record_info = parse_bool(key, v)?,
            "record_reconstruction" => self.train.record_reconstruction = parse_bool(key, v)?,
            "st_enabled" => self.train.st_enabled = parse_bool(key, v)?,
            "mask_mode" => self.train.mask_mode = v.parse::<MaskMode>()?,
            "folds" => self.train.folds = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "sets" => self.synth.sets = parse(key, v)?,
            "oct_fraction" => self.synth.oct_fraction = parse(key, v)?,
            "missing_fundus_fraction" => self.synth.missing_fundus_fraction = parse(key, v)?,
            "max_oct" => self.synth.max_oct = parse(key, v)?,
            "data" => self.data = opt_path(v),
            "out" => self.out = PathBuf::from(v),
            "run_folds" => {
                self.run_folds = match v {
                    "" | "all" => None,
                    list => Some(list.split(',').map(|f| parse(key, f.trim())).collect::<Result<_>>()?),
                }
            }
            "fold" => self.fold = parse(key, v)?,
            "checkpoint" => self.checkpoint = opt_path(v),
            "samples" => {
                self.samples = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "scale_px" => self.scale_px = parse(key, v)?,
            "axis" => self.axis = if v.is_empty() { None } else { Some(v.parse()?) },
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "image_size" => self.arch.mme.image_size.to_string(),
            "patch_size" => self.arch.mme.patch_size.to_string(),
            "embed_dim" => self.arch.mme.embed_dim.to_string(),
            "blocks" => self.arch.st.blocks.to_string(),
            "heads" => self.arch.st.heads.to_string(),
            "local_dim" => self.arch.st.local_dim.to_string(),
            "selector_hidden" => self.arch.st.selector_hidden.to_string(),
            "mlp_ratio" => self.arch.st.mlp_ratio.to_string(),
            "gradient_coupling" => self.arch.st.gradient_coupling.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "base_lr" => self.train.base_lr.to_string(),
            "alpha" => self.train.alpha.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "selection_rate" => self.train.selection_rate.to_string(),
            "tsia" => self.train.tsia.to_string(),
            "record_info" => self.train.record_info.to_string(),
            "record_reconstruction" => self.train.record_reconstruction.to_string(),
            "st_enabled" => self.train.st_enabled.to_string(),
            "mask_mode" => self.train.mask_mode.to_string(),
            "folds" => self.train.folds.to_string(),
            "seed" => self.train.seed.to_string(),
            "sets" => self.synth.sets.to_string(),
            "oct_fraction" => self.synth.oct_fraction.to_string(),
            "missing_fundus_fraction" => self.synth.missing_fundus_fraction.to_string(),
            "max_oct" => self.synth.max_oct.to_string(),
            "data" => path(&self.data),
            "out" => self.out.display().to_string(),
            "run_folds" => self.run_folds.as_ref().map_or_else(|| "all".to_string(), |f| join(f)),
            "fold" => self.fold.to_string(),
            "checkpoint" => path(&self.checkpoint),
            "samples" => join(&self.samples),
            "scale_px" => self.scale_px.to_string(),
            "axis" => self.axis.map(|a| a.to_string()).unwrap_or_default(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Model configuration with the run's ablation flags applied.
    pub fn model_config(&self) -> ModelConfig {
        self.train.model_config(&self.arch)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config().validate()?;
        self.synth.validate()?;
        if self.fold >= self.train.folds {
            return Err(Error::Config(format!("fold {} is out of range for {} folds", self.fold, self.train.folds)));
        }
        if let Some(f) = self.run_folds.as_ref().and_then(|r| r.iter().find(|&&f| f >= self.train.folds)) {
            return Err(Error::Config(format!("run_folds entry {f} is out of range for {} folds", self.train.folds)));
        }
        if self.scale_px == 0 {
            return Err(Error::Config("scale_px must be positive".into()));
        }
        Ok(())
    }
}
