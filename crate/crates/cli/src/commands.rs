use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msvit::data::synth::generate_synthetic;
use msvit::data::Dataset;
use msvit::model::Msvit;
use msvit::nn::{load_checkpoint, save_checkpoint, ParamStore};
use msvit::train::{
    ablation_sweep, cross_validate, eval_samples, evaluate, fold_splits, format_key_values, format_table, EpochStats,
    Float, MetricsReport,
};
use msvit::visualization::{mean_map, sample_maps, write_maps};
use msvit::{Error, Result};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data.as_ref().ok_or_else(|| Error::Config("no dataset given (set `data` or pass --data)".into()))?;
    let ds = Dataset::load(path)?;
    if ds.image_size != cfg.arch.mme.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but image_size is {}",
            ds.image_size, cfg.arch.mme.image_size
        )));
    }
    Ok(ds)
}

pub fn checkpoint_path(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold{fold}.ckpt"))
}

fn write_tables(out: &Path, stem: &str, rows: &[(String, MetricsReport)]) -> Result<()> {
    for gene in ["arms2", "cfh"] {
        write_file(&out.join(format!("{stem}_{gene}.tsv")), &format_table(rows, gene))?;
    }
    write_file(&out.join(format!("{stem}.txt")), &format_key_values(rows))
}

fn log_line(log: &mut String, e: &EpochStats) {
    let _ = writeln!(log, "{}\t{}\t{}\t{}\t{}", e.fold, e.epoch, e.lr, e.train_loss, e.val_accuracy);
}

pub fn generate(cfg: &RunConfig) -> Result<PathBuf> {
    ensure_dir(&cfg.out)?;
    let manifest = generate_synthetic(&cfg.synth, cfg.train.seed, &cfg.out)?;
    // recorded relative to the dataset itself so copies of a dataset compare equal
    let recorded = RunConfig { out: PathBuf::from("."), ..cfg.clone() };
    recorded.write(&cfg.out.join(CONFIG_FILE))?;
    println!("wrote {} patient sets to {}", cfg.synth.sets, manifest.display());
    Ok(manifest)
}

pub fn train(cfg: &RunConfig, verbose: bool) -> Result<MetricsReport> {
    let ds = load_data(cfg)?;
    ensure_dir(&cfg.out)?;
    cfg.write(&cfg.out.join(CONFIG_FILE))?;
    let mut log = String::from("fold\tepoch\tlr\ttrain_loss\tval_accuracy\n");
    let cv = cross_validate(&ds, &cfg.arch, &cfg.train, cfg.run_folds.as_deref(), &mut |e| {
        if verbose {
            eprintln!("fold {} epoch {} loss {:.4} val {:.4}", e.fold, e.epoch, e.train_loss, e.val_accuracy);
        }
        log_line(&mut log, e);
    })?;
    let mut rows = Vec::new();
    for f in &cv.folds {
        save_checkpoint(&f.store, &checkpoint_path(&cfg.out, f.fold))?;
        println!(
            "fold {}: best epoch {} val {:.4} test arms2 {:.4} cfh {:.4}",
            f.fold, f.best_epoch, f.best_val_accuracy, f.report.arms2.accuracy, f.report.cfh.accuracy
        );
        rows.push((format!("fold{}", f.fold), f.report));
    }
    rows.push(("mean".to_string(), cv.mean));
    write_tables(&cfg.out, "metrics", &rows)?;
    write_file(&cfg.out.join("train_log.tsv"), &log)?;
    println!("mean test accuracy: arms2 {:.4} cfh {:.4}", cv.mean.arms2.accuracy, cv.mean.cfh.accuracy);
    Ok(cv.mean)
}

/// Model and parameters from a checkpoint, checked against the config.
pub fn restore(cfg: &RunConfig, path: &Path) -> Result<(Msvit, ParamStore<Float>)> {
    let (model, mut store) = Msvit::init::<Float, _>(&cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(0))?;
    load_checkpoint(&mut store, path)?;
    Ok((model, store))
}

fn checkpoint_for(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| checkpoint_path(&cfg.out, cfg.fold))
}

pub fn eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let ds = load_data(cfg)?;
    let (model, store) = restore(cfg, &checkpoint_for(cfg))?;
    let split = &fold_splits(ds.len(), cfg.train.folds, cfg.train.seed)?[cfg.fold];
    let test = eval_samples(&ds, &split.test, cfg.train.mask_mode);
    let report = evaluate(&model, &store, &test, cfg.train.batch_size)?;
    ensure_dir(&cfg.out)?;
    let rows = vec![(format!("fold{}", cfg.fold), report)];
    write_tables(&cfg.out, &format!("eval_fold{}", cfg.fold), &rows)?;
    print!("{}", format_key_values(&rows));
    Ok(report)
}

pub fn ablate(cfg: &RunConfig, verbose: bool) -> Result<Vec<(String, MetricsReport)>> {
    let axis = cfg.axis.ok_or_else(|| Error::Config("ablate needs an axis (set `axis` or pass --axis)".into()))?;
    let ds = load_data(cfg)?;
    ensure_dir(&cfg.out)?;
    cfg.write(&cfg.out.join(CONFIG_FILE))?;
    let sweep = ablation_sweep(&ds, &cfg.arch, &cfg.train, axis, cfg.run_folds.as_deref(), &mut |label, e| {
        if verbose {
            eprintln!("{label} fold {} epoch {} val {:.4}", e.fold, e.epoch, e.val_accuracy);
        }
    })?;
    let rows: Vec<(String, MetricsReport)> = sweep.into_iter().map(|r| (r.label, r.report)).collect();
    write_tables(&cfg.out, &format!("ablation_{axis}"), &rows)?;
    for gene in ["arms2", "cfh"] {
        println!("{gene}");
        print!("{}", format_table(&rows, gene));
    }
    Ok(rows)
}

pub fn visualize(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = load_data(cfg)?;
    let (model, store) = restore(cfg, &checkpoint_for(cfg))?;
    let idx: Vec<usize> = if cfg.samples.is_empty() {
        fold_splits(ds.len(), cfg.train.folds, cfg.train.seed)?[cfg.fold].test.clone()
    } else {
        cfg.samples
            .iter()
            .map(|id| ds.index_of(id).ok_or_else(|| Error::Argument(format!("no sample with id {id:?}"))))
            .collect::<Result<_>>()?
    };
    let samples = eval_samples(&ds, &idx, cfg.train.mask_mode);
    let maps = sample_maps(&model, &store, &samples, cfg.train.batch_size)?;
    let mut written = Vec::new();
    for (s, m) in samples.iter().zip(&maps) {
        written.extend(write_maps(m, &s.id, &cfg.out, cfg.scale_px)?);
    }
    let mean = mean_map(&maps)?;
    written.extend(write_maps(&mean, "mean", &cfg.out, cfg.scale_px)?);
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "wrote {} maps to {}; mean selection frequency fundus {:.3} oct {:.3} of {}",
        written.len(),
        cfg.out.display(),
        avg(&mean.fundus),
        avg(&mean.oct),
        mean.blocks
    );
    Ok(written)
}
