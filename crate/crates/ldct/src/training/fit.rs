//! The training loop: deterministic per-epoch data streams, a warm-up phase
//! that re-anchors the Bayesian posterior, per-epoch validation with metric
//! logging, early stopping, bit-exact checkpoints, and resume.

use super::checkpoint::{
    disc_state, load_checkpoint, model_state, restore_disc, restore_model, save_checkpoint,
    AdamState, Checkpoint, CHECKPOINT_VERSION,
};
use super::config::ExperimentConfig;
use super::eval::predict_mean;
use super::loss::LossRecord;
use super::opt::Adam;
use super::perceptual::PerceptualNet;
use super::step::{train_step, Batch, StepConfig};
use crate::bnua::{bnua_loss, mc_covariance, squeeze, McCovariance};
use crate::data::{
    extract_patches, extract_unpaired_patches, Dataset, DomainKind, SlicePair, Split,
};
use crate::metrics::{evaluate_pair, to_f64};
use crate::model::{ImagePatch, ReconModel};
use crate::rda::Discriminator;
use crate::rng::derive;
use crate::{Error, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use std::path::{Path, PathBuf};

/// Name of the per-epoch CSV log inside a run directory.
pub const TRAIN_LOG_NAME: &str = "train_log.csv";
/// Exact header of the training log.
pub const TRAIN_LOG_HEADER: &str =
    "epoch,l1,pl,kl_enc,kl_dec,bnua,rda,val_psnr,val_ssim,val_gmsd,val_dss,val_bnua_disc";
/// Rolling checkpoint filename (state after the most recent epoch).
pub const LAST_CHECKPOINT: &str = "last.ckpt";
/// Best-validation checkpoint filename.
pub const BEST_CHECKPOINT: &str = "best.ckpt";
/// Config snapshot filename written into every run directory.
pub const CONFIG_SNAPSHOT: &str = "config.json";

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l1: f64,
    pub pl: f64,
    pub kl_enc: f64,
    pub kl_dec: f64,
    pub bnua: f64,
    pub rda: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_gmsd: f64,
    pub val_dss: f64,
    pub val_bnua_disc: f64,
}

impl EpochLog {
    /// CSV row matching [`TRAIN_LOG_HEADER`]. Floats print in shortest
    /// round-trip form, so identical runs produce identical files.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.l1,
            self.pl,
            self.kl_enc,
            self.kl_dec,
            self.bnua,
            self.rda,
            self.val_psnr,
            self.val_ssim,
            self.val_gmsd,
            self.val_dss,
            self.val_bnua_disc
        )
    }
}

/// Result of a (possibly resumed) training run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Total completed epochs, including any before a resume.
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Rows produced by this invocation.
    pub log: Vec<EpochLog>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

struct TrainData {
    source_train: Vec<SlicePair>,
    target_train: Vec<Array2<f32>>,
    source_val: Vec<SlicePair>,
    target_val: Vec<Array2<f32>>,
}

fn load_data(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainData> {
    let source_train = dataset.load_pairs(DomainKind::Source, Split::Train)?;
    let target_train = dataset.target_train_ldct()?;
    let source_val = dataset.load_pairs(DomainKind::Source, Split::Val)?;
    let target_val = dataset
        .load_pairs(DomainKind::Target, Split::Val)?
        .into_iter()
        .map(|p| p.ldct)
        .collect::<Vec<_>>();
    if target_train.is_empty() {
        return Err(Error::Data("target training split is empty".into()));
    }
    let slice_size = dataset.manifest().slice_size;
    if config.patch_size > slice_size {
        return Err(Error::Config(format!(
            "patch_size {} exceeds dataset slice size {slice_size}",
            config.patch_size
        )));
    }
    let pool = source_train.len() * config.patches_per_slice;
    if pool < config.batch_size {
        return Err(Error::Config(format!(
            "training pool ({pool} patches) smaller than one batch ({})",
            config.batch_size
        )));
    }
    Ok(TrainData {
        source_train,
        target_train,
        source_val,
        target_val,
    })
}

struct Trainer {
    config: ExperimentConfig,
    model: ReconModel<f32>,
    disc: Discriminator<f32>,
    perceptual: PerceptualNet<f32>,
    opt_model: Adam<f32>,
    opt_disc: Adam<f32>,
    rng_mc: ChaCha20Rng,
    best_val: f64,
    best_epoch: usize,
    epochs_since_improve: usize,
}

impl Trainer {
    fn adam(&self, lr: f64) -> Adam<f32> {
        Adam::new(
            lr as f32,
            self.config.adam_beta1 as f32,
            self.config.adam_beta2 as f32,
            self.config.adam_eps as f32,
        )
    }

    fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch,
            config: self.config.clone(),
            model: model_state(&self.model),
            disc: disc_state(&self.disc),
            opt_model: AdamState::capture(&self.opt_model),
            opt_disc: AdamState::capture(&self.opt_disc),
            rng_mc: self.rng_mc.clone(),
            best_val: self.best_val.is_finite().then_some(self.best_val),
            best_epoch: self.best_epoch,
            epochs_since_improve: self.epochs_since_improve,
        }
    }

    /// One pass over the training pool. Patch extraction and shuffling come
    /// from a stream derived from `(seed, tag, epoch)`, so epochs are
    /// reproducible independently of how the run was segmented.
    fn train_epoch(
        &mut self,
        data: &TrainData,
        sc: &StepConfig<f32>,
        tag: &str,
        epoch: usize,
    ) -> Result<LossRecord> {
        let cfg = &self.config;
        let mut rng_data = derive(cfg.seed, tag, epoch as u64);

        let mut src_order: Vec<usize> = (0..data.source_train.len()).collect();
        src_order.shuffle(&mut rng_data);
        let mut src_pool: Vec<(ImagePatch<f32>, ImagePatch<f32>)> = Vec::new();
        for &i in &src_order {
            src_pool.extend(extract_patches(
                &data.source_train[i],
                cfg.patches_per_slice,
                cfg.patch_size,
                &mut rng_data,
            )?);
        }
        src_pool.shuffle(&mut rng_data);

        let mut tgt_order: Vec<usize> = (0..data.target_train.len()).collect();
        tgt_order.shuffle(&mut rng_data);
        let mut tgt_pool: Vec<ImagePatch<f32>> = Vec::new();
        for &i in &tgt_order {
            tgt_pool.extend(extract_unpaired_patches(
                &data.target_train[i],
                cfg.patches_per_slice,
                cfg.patch_size,
                &mut rng_data,
            )?);
        }
        tgt_pool.shuffle(&mut rng_data);

        let n_batches = src_pool.len() / cfg.batch_size;
        let mut sum = LossRecord::ZERO;
        for b in 0..n_batches {
            let src = &src_pool[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let tgt: Vec<ImagePatch<f32>> = (0..cfg.batch_size)
                .map(|i| tgt_pool[(b * cfg.batch_size + i) % tgt_pool.len()].clone())
                .collect();
            let batch = Batch::from_patches(src, &tgt)?;
            let out = train_step(
                &mut self.model,
                &mut self.disc,
                &self.perceptual,
                &batch,
                sc,
                &mut self.opt_model,
                &mut self.opt_disc,
                &mut self.rng_mc,
            )?;
            sum.add_assign(&out.losses);
        }
        Ok(sum.scaled(1.0 / n_batches as f64))
    }

    /// Validation pass: reconstruction quality on the source validation
    /// split, plus the source/target embedding-covariance discrepancy.
    /// Returns the selection loss (L1 + perceptual) and the log fields.
    fn validate_epoch(&self, data: &TrainData, epoch: usize) -> Result<(f64, ValStats)> {
        let cfg = &self.config;
        let mut rng = derive(cfg.seed, "epoch-eval", epoch as u64);
        let mut covs_s: Vec<McCovariance<f32>> = Vec::new();
        let mut covs_t: Vec<McCovariance<f32>> = Vec::new();
        let mut loss_acc = 0.0;
        let (mut psnr_a, mut ssim_a, mut gmsd_a, mut dss_a) = (0.0, 0.0, 0.0, 0.0);
        for pair in &data.source_val {
            let (pred, stack) = predict_mean(&self.model, &pair.ldct, cfg.eval_mc_samples, &mut rng)?;
            covs_s.push(mc_covariance(&squeeze(&stack)?)?);
            let scores = evaluate_pair(&to_f64(&pair.ndct), &to_f64(&pred), 1.0)?;
            psnr_a += scores.psnr;
            ssim_a += scores.ssim;
            gmsd_a += scores.gmsd;
            dss_a += scores.dss;
            let l1 = (&pred - &pair.ndct).mapv(f32::abs).mean().unwrap_or(0.0);
            let patch = |img: &Array2<f32>| {
                img.clone()
                    .insert_axis(ndarray::Axis(0))
                    .insert_axis(ndarray::Axis(0))
                    .into_dyn()
            };
            let fp = self.perceptual.features(&patch(&pred))?;
            let fy = self.perceptual.features(&patch(&pair.ndct))?;
            let pl = (&fp - &fy).mapv(|v| v * v).mean().unwrap_or(0.0);
            loss_acc += f64::from(l1) + f64::from(pl);
        }
        for ldct in &data.target_val {
            let (_, stack) = predict_mean(&self.model, ldct, cfg.eval_mc_samples, &mut rng)?;
            covs_t.push(mc_covariance(&squeeze(&stack)?)?);
        }
        let n = data.source_val.len().max(1) as f64;
        let bnua_disc = if covs_s.is_empty() || covs_t.is_empty() {
            0.0
        } else {
            f64::from(bnua_loss(&covs_s, &covs_t)?)
        };
        Ok((
            loss_acc / n,
            ValStats {
                psnr: psnr_a / n,
                ssim: ssim_a / n,
                gmsd: gmsd_a / n,
                dss: dss_a / n,
                bnua_disc,
            },
        ))
    }
}

struct ValStats {
    psnr: f64,
    ssim: f64,
    gmsd: f64,
    dss: f64,
    bnua_disc: f64,
}

fn write_log(run_dir: &Path, rows: &[EpochLog]) -> Result<()> {
    let path = run_dir.join(TRAIN_LOG_NAME);
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(|source| Error::Io { path, source })
}

fn snapshot_config(run_dir: &Path, config: &ExperimentConfig) -> Result<()> {
    let path = run_dir.join(CONFIG_SNAPSHOT);
    let json = serde_json::to_string_pretty(config).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    std::fs::write(&path, json).map_err(|source| Error::Io { path, source })
}

/// Trains from scratch into `run_dir`: deterministic warm-up, posterior
/// re-anchoring, then the main epochs with validation, checkpointing, and
/// early stopping.
pub fn fit(config: &ExperimentConfig, dataset: &Dataset, run_dir: &Path) -> Result<FitOutcome> {
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|source| Error::Io {
        path: run_dir.to_path_buf(),
        source,
    })?;
    snapshot_config(run_dir, config)?;
    let data = load_data(config, dataset)?;

    let mut model = ReconModel::<f32>::new(config.channels, config.moped_delta as f32, config.seed)?;
    let disc = Discriminator::new(config.disc_base_channels, config.seed)?;
    let perceptual = PerceptualNet::new(config.seed);
    let mut trainer = Trainer {
        model: {
            model.freeze_sigma = true; // warm-up runs the deterministic reduction
            model
        },
        disc,
        perceptual,
        opt_model: Adam::new(0.0, 0.0, 0.0, 1.0), // replaced below
        opt_disc: Adam::new(0.0, 0.0, 0.0, 1.0),
        rng_mc: derive(config.seed, "train-mc", 0),
        config: config.clone(),
        best_val: f64::INFINITY,
        best_epoch: 0,
        epochs_since_improve: 0,
    };
    trainer.opt_model = trainer.adam(config.learning_rate);
    trainer.opt_disc = trainer.adam(config.disc_learning_rate);

    if config.moped_pretrain_epochs > 0 {
        let pre_sc = StepConfig {
            m: 2, // all samples coincide while frozen; keep the pass cheap
            kl_scale: 0.0,
            beta1: 0.0,
            beta2: 0.0,
        };
        for epoch in 0..config.moped_pretrain_epochs {
            let rec = trainer.train_epoch(&data, &pre_sc, "pretrain-data", epoch)?;
            eprintln!(
                "warm-up {}/{}: l1 {:.5} pl {:.5}",
                epoch + 1,
                config.moped_pretrain_epochs,
                rec.l1,
                rec.pl
            );
        }
        trainer.model.moped_reinit(config.moped_delta as f32)?;
        trainer.opt_model = trainer.adam(config.learning_rate);
    }
    trainer.model.freeze_sigma = config.freeze_sigma;

    run_epochs(trainer, &data, run_dir, 0, config.epochs)
}

/// Continues training from a checkpoint into `run_dir`, optionally raising
/// the total epoch budget.
pub fn resume(
    checkpoint_path: &Path,
    dataset: &Dataset,
    run_dir: &Path,
    epochs_override: Option<usize>,
) -> Result<FitOutcome> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let mut config = ckpt.config.clone();
    if let Some(e) = epochs_override {
        config.epochs = e;
    }
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|source| Error::Io {
        path: run_dir.to_path_buf(),
        source,
    })?;
    snapshot_config(run_dir, &config)?;
    let data = load_data(&config, dataset)?;

    let mut model = ReconModel::<f32>::new(config.channels, config.moped_delta as f32, config.seed)?;
    model.freeze_sigma = config.freeze_sigma;
    restore_model(&mut model, &ckpt.model)?;
    let mut disc = Discriminator::new(config.disc_base_channels, config.seed)?;
    restore_disc(&mut disc, &ckpt.disc)?;
    let mut trainer = Trainer {
        model,
        disc,
        perceptual: PerceptualNet::new(config.seed),
        opt_model: Adam::new(0.0, 0.0, 0.0, 1.0),
        opt_disc: Adam::new(0.0, 0.0, 0.0, 1.0),
        rng_mc: ckpt.rng_mc.clone(),
        config: config.clone(),
        best_val: ckpt.best_val.unwrap_or(f64::INFINITY),
        best_epoch: ckpt.best_epoch,
        epochs_since_improve: ckpt.epochs_since_improve,
    };
    trainer.opt_model = trainer.adam(config.learning_rate);
    trainer.opt_disc = trainer.adam(config.disc_learning_rate);
    ckpt.opt_model.restore_into(&mut trainer.opt_model)?;
    ckpt.opt_disc.restore_into(&mut trainer.opt_disc)?;

    run_epochs(trainer, &data, run_dir, ckpt.epoch, config.epochs)
}

fn run_epochs(
    mut trainer: Trainer,
    data: &TrainData,
    run_dir: &Path,
    start_epoch: usize,
    total_epochs: usize,
) -> Result<FitOutcome> {
    let config = trainer.config.clone();
    let sc = StepConfig {
        m: config.mc_samples,
        kl_scale: config.effective_kl_scale() as f32,
        beta1: config.beta1_bnua as f32,
        beta2: config.beta2_rda as f32,
    };
    let last_path = run_dir.join(LAST_CHECKPOINT);
    let best_path = run_dir.join(BEST_CHECKPOINT);
    let mut rows: Vec<EpochLog> = Vec::new();
    write_log(run_dir, &rows)?;
    if start_epoch >= total_epochs {
        // Nothing to train: persist the initial state so downstream tooling
        // has a checkpoint to work with.
        save_checkpoint(&last_path, &trainer.checkpoint(start_epoch))?;
        return Ok(FitOutcome {
            epochs_run: start_epoch,
            stopped_early: false,
            best_epoch: trainer.best_epoch,
            best_val_loss: trainer.best_val,
            log: rows,
            last_checkpoint: last_path,
            best_checkpoint: best_path,
        });
    }

    let mut stopped_early = false;
    let mut epochs_run = start_epoch;
    for epoch in start_epoch..total_epochs {
        let rec = trainer.train_epoch(data, &sc, "epoch-data", epoch)?;
        let (val_loss, stats) = trainer.validate_epoch(data, epoch)?;
        let row = EpochLog {
            epoch,
            l1: rec.l1,
            pl: rec.pl,
            kl_enc: rec.kl_enc,
            kl_dec: rec.kl_dec,
            bnua: rec.bnua,
            rda: rec.rda,
            val_psnr: stats.psnr,
            val_ssim: stats.ssim,
            val_gmsd: stats.gmsd,
            val_dss: stats.dss,
            val_bnua_disc: stats.bnua_disc,
        };
        eprintln!(
            "epoch {}: l1 {:.5} val_psnr {:.2} val_ssim {:.4} val_bnua {:.3e}",
            epoch, row.l1, row.val_psnr, row.val_ssim, row.val_bnua_disc
        );
        rows.push(row);
        write_log(run_dir, &rows)?;

        epochs_run = epoch + 1;
        if val_loss < trainer.best_val {
            trainer.best_val = val_loss;
            trainer.best_epoch = epoch;
            trainer.epochs_since_improve = 0;
            save_checkpoint(&best_path, &trainer.checkpoint(epochs_run))?;
        } else {
            trainer.epochs_since_improve += 1;
        }
        save_checkpoint(&last_path, &trainer.checkpoint(epochs_run))?;

        if trainer.epochs_since_improve >= config.early_stop_patience {
            stopped_early = true;
            eprintln!(
                "early stop after epoch {epoch}: no improvement for {} epochs",
                trainer.epochs_since_improve
            );
            break;
        }
    }

    Ok(FitOutcome {
        epochs_run,
        stopped_early,
        best_epoch: trainer.best_epoch,
        best_val_loss: trainer.best_val,
        log: rows,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}
