//! Alternating adversarial training.
//!
//! Each step updates the discriminator once on a detached generated batch,
//! then the generator once against fresh discriminator scores. Epoch `e`
//! draws its batches from streams derived from `(seed, e)` only, so a run
//! resumed from an epoch-boundary checkpoint replays the uninterrupted run.

mod adam;
pub mod checkpoint;
mod config;
mod schedule;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

pub use adam::{Adam, ADAM_EPS};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{parse_override, DataSection, LossSection, ModelSection, PerceptualSection, TrainConfig, TrainSection};
pub use schedule::lr_at;

use crate::data::{self, BatchRng, ImagePool, SplitManifest};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::evaluator::{self, EvalPair};
use crate::generator::Generator;
use crate::losses::{self, GeneratorLossParts, LossRecord};
use crate::perceptual::PerceptualExtractor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const VALIDATION_FILE: &str = "validation.csv";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const METRICS_HEADER: &str = "step,epoch,d_loss,g_qua,g_fid,g_idt,g_total,lr";

/// Seed offset separating discriminator init from generator init.
const DISC_SEED_OFFSET: u64 = 0x5EED_D15C;

/// One logged optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based global step.
    pub step: u64,
    pub epoch: u64,
    pub record: LossRecord,
    pub lr: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let r = &self.record;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, r.d_loss, r.g_qua, r.g_fid, r.g_idt, r.g_total, self.lr
        )
    }
}

pub fn checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.safetensors"))
}

/// Most recent `epoch_XXXX.safetensors` under `out_dir`, with its epoch.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".safetensors"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best)
}

/// Models, optimizers and progress counters.
pub struct Trainer {
    config: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    perceptual: PerceptualExtractor,
    opt_g: Adam,
    opt_d: Adam,
    epoch: u64,
    step: u64,
}

impl Trainer {
    pub fn new(config: &TrainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let perceptual = PerceptualExtractor::new(&config.weights_source(), &config.perceptual.layers, device)?;
        Self::with_extractor(config, perceptual, device)
    }

    /// Build with an already-loaded perceptual extractor.
    pub fn with_extractor(config: &TrainConfig, perceptual: PerceptualExtractor, device: &Device) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let generator = Generator::new(&config.generator_config(), seed, device)?;
        let discriminator = Discriminator::new(&config.discriminator_config(), seed ^ DISC_SEED_OFFSET, device)?;
        let t = &config.train;
        Ok(Self {
            config: config.clone(),
            generator,
            discriminator,
            perceptual,
            opt_g: Adam::new(t.beta1, t.beta2),
            opt_d: Adam::new(t.beta1, t.beta2),
            epoch: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn perceptual(&self) -> &PerceptualExtractor {
        &self.perceptual
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Loss components of `G` on a batch without updating anything.
    pub fn generator_losses(&self, low: &Tensor, high: &Tensor) -> Result<GeneratorLossParts> {
        let x_g = self.generator.forward(low)?;
        let d_h = self.discriminator.forward(high)?;
        let d_g = self.discriminator.forward(&x_g)?;
        let q = losses::multiscale_g_quality_loss(&d_h, &d_g)?;
        let f = losses::fidelity_loss(&self.perceptual, low, &x_g, self.config.loss.fidelity_norm)?;
        let i = losses::identity_loss(high, &self.generator.forward(high)?)?;
        Ok(GeneratorLossParts {
            quality: losses::scalar(&q)?,
            fidelity: losses::scalar(&f)?,
            identity: losses::scalar(&i)?,
        })
    }

    /// Discriminator update on a detached generated batch; returns the loss
    /// value before the update.
    pub fn d_step(&mut self, low: &Tensor, high: &Tensor, lr: f64) -> Result<f64> {
        let x_g = self.generator.forward(low)?.detach();
        let d_l = self.discriminator.forward(low)?;
        let d_h = self.discriminator.forward(high)?;
        let d_g = self.discriminator.forward(&x_g)?;
        let ld = losses::multiscale_d_loss(&d_l, &d_h, &d_g)?;
        let value = losses::scalar(&ld)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("d_loss"));
        }
        let grads = ld.backward()?;
        self.opt_d.step(self.discriminator.params(), &grads, lr)?;
        Ok(value)
    }

    /// Generator update against fresh discriminator scores; the real-high
    /// scores carry no gradient. Returns the components before the update.
    pub fn g_step(&mut self, low: &Tensor, high: &Tensor, lr: f64) -> Result<GeneratorLossParts> {
        let weights = self.config.loss_weights();
        let x_g = self.generator.forward(low)?;
        let d_h = self.discriminator.forward(high)?.detach();
        let d_g = self.discriminator.forward(&x_g)?;
        let lq = losses::multiscale_g_quality_loss(&d_h, &d_g)?;
        let lf = losses::fidelity_loss(&self.perceptual, low, &x_g, self.config.loss.fidelity_norm)?;
        let g_of_high = self.generator.forward(high)?;
        let g_of_high = if weights.lambda_idt == 0.0 { g_of_high.detach() } else { g_of_high };
        let li = losses::identity_loss(high, &g_of_high)?;
        let parts = GeneratorLossParts {
            quality: losses::scalar(&lq)?,
            fidelity: losses::scalar(&lf)?,
            identity: losses::scalar(&li)?,
        };
        losses::total_g_loss(&parts, &weights)?;
        let total = (((lq * weights.lambda_qua)? + (lf * weights.lambda_fid)?)? + (li * weights.lambda_idt)?)?;
        let grads = total.backward()?;
        self.opt_g.step(self.generator.params(), &grads, lr)?;
        Ok(parts)
    }

    /// One discriminator update followed by one generator update.
    pub fn training_step(&mut self, low: &Tensor, high: &Tensor, lr: f64) -> Result<LossRecord> {
        let d = self.d_step(low, high, lr)?;
        let parts = self.g_step(low, high, lr)?;
        self.step += 1;
        LossRecord::new(d, parts, &self.config.loss_weights())
    }

    pub fn steps_per_epoch(&self, low_pool_len: usize) -> usize {
        match self.config.train.steps_per_epoch {
            0 => (low_pool_len / self.config.train.batch_size).max(1),
            n => n,
        }
    }

    /// Run the next epoch; `on_step` sees every record as it is produced.
    pub fn run_epoch(
        &mut self,
        low_pool: &ImagePool,
        high_pool: &ImagePool,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let t = self.config.train.clone();
        let epoch = self.epoch;
        let lr = lr_at(epoch, &t)?;
        let mut rng = BatchRng::for_epoch(t.seed, epoch);
        let steps = self.steps_per_epoch(low_pool.len());
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (low, high) = data::sample_batch(low_pool, high_pool, t.batch_size, t.crop, self.config.data.hflip, &mut rng)?;
            let record = self.training_step(&low, &high, lr)?;
            let log = StepLog {
                step: self.step,
                epoch,
                record,
                lr,
            };
            on_step(&log)?;
            logs.push(log);
        }
        self.epoch += 1;
        Ok(logs)
    }

    fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            epoch: self.epoch,
            step: self.step,
            config_hash: self.config.hash()?,
            seed: self.config.train.seed,
            generator: self.generator.config().clone(),
            discriminator: self.discriminator.config().clone(),
            adam_g_step: self.opt_g.step_count(),
            adam_d_step: self.opt_d.step_count(),
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.meta()?, &self.generator, &self.discriminator, &self.opt_g, &self.opt_d)
    }

    /// Restore weights, optimizer state and counters; the checkpoint must
    /// come from the same configuration.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let device = self.perceptual_device();
        let ckpt = checkpoint::load(path, &device)?;
        let hash = self.config.hash()?;
        if ckpt.meta.config_hash != hash {
            return Err(Error::Config(format!(
                "{} was produced by a different configuration",
                path.display()
            )));
        }
        checkpoint::restore_params(self.generator.params(), &ckpt.generator, "generator")?;
        checkpoint::restore_params(self.discriminator.params(), &ckpt.discriminator, "discriminator")?;
        self.opt_g.load_state(ckpt.meta.adam_g_step, ckpt.opt_g)?;
        self.opt_d.load_state(ckpt.meta.adam_d_step, ckpt.opt_d)?;
        self.epoch = ckpt.meta.epoch;
        self.step = ckpt.meta.step;
        Ok(())
    }

    fn perceptual_device(&self) -> Device {
        self.generator
            .params()
            .iter()
            .next()
            .map(|(_, v)| v.device().clone())
            .unwrap_or(Device::Cpu)
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub last_checkpoint: PathBuf,
    pub last_epoch: u64,
    /// Best checkpoint by validation PSNR, when a validation split exists.
    pub best: Option<(u64, f64)>,
    pub steps: u64,
}

fn load_or_build_manifest(cfg: &TrainConfig) -> Result<SplitManifest> {
    let path = cfg.manifest_path();
    if path.exists() {
        return SplitManifest::load(&path);
    }
    let (raw, expert) = data::corpus_dirs(&cfg.data.root);
    let manifest = data::build_splits(&data::list_images(&raw)?, &data::list_images(&expert)?, cfg.train.seed)?;
    manifest.save(&path)?;
    Ok(manifest)
}

/// Keep the CSV header and rows with `step <= last_step`.
fn truncate_metrics(path: &Path, last_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(step) => step <= last_step,
            None => true,
        };
        if keep {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Validation rows `(epoch, psnr)` up to and including `last_epoch`.
fn read_validation(path: &Path, last_epoch: u64) -> Result<Vec<(u64, f64)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let mut f = l.split(',');
            let e = f.next()?.parse::<u64>().ok()?;
            let p = f.next()?.parse::<f64>().ok()?;
            (e <= last_epoch).then_some((e, p))
        })
        .collect())
}

fn open_append(path: &Path, header: &str) -> Result<File> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Run (or resume) a full training job described by `config`.
pub fn train(config: &TrainConfig, device: &Device) -> Result<TrainSummary> {
    config.validate()?;
    let out = &config.data.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config.save(&out.join(EFFECTIVE_CONFIG_FILE))?;

    let manifest = load_or_build_manifest(config)?;
    let (raw_dir, expert_dir) = data::corpus_dirs(&config.data.root);
    let (long, crop) = (config.data.long_side, config.train.crop);
    let (low_pool, dropped_low) = ImagePool::load(&raw_dir, &manifest.low_train, long, crop, device)?;
    let (high_pool, dropped_high) = ImagePool::load(&expert_dir, &manifest.high_train, long, crop, device)?;
    if low_pool.is_empty() || high_pool.is_empty() {
        return Err(Error::Empty("training pool after dropping undersized images"));
    }
    log::info!(
        "pools: {} low ({} dropped), {} high ({} dropped)",
        low_pool.len(),
        dropped_low.len(),
        high_pool.len(),
        dropped_high.len()
    );
    let val: Vec<EvalPair> = evaluator::load_pairs(&raw_dir, &expert_dir, &manifest.val, long, device)?;

    let mut trainer = Trainer::new(config, device)?;
    let metrics_path = out.join(METRICS_FILE);
    let val_path = out.join(VALIDATION_FILE);
    let mut last_good = None;
    if config.train.resume {
        if let Some((epoch, path)) = latest_checkpoint(out)? {
            trainer.restore(&path)?;
            log::info!("resumed from {} (epoch {epoch})", path.display());
            last_good = Some(path);
        }
    }
    if last_good.is_none() {
        for p in [&metrics_path, &val_path] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    truncate_metrics(&metrics_path, trainer.step())?;
    truncate_metrics(&val_path, trainer.epoch())?;
    let mut best = read_validation(&val_path, trainer.epoch())?
        .into_iter()
        .fold(None, |acc: Option<(u64, f64)>, (e, p)| match acc {
            Some((_, bp)) if bp >= p => acc,
            _ => Some((e, p)),
        });

    let mut metrics = open_append(&metrics_path, METRICS_HEADER)?;
    let mut val_log = open_append(&val_path, "epoch,psnr,ssim")?;
    while trainer.epoch() < config.train.epochs {
        let result = trainer.run_epoch(&low_pool, &high_pool, |log| {
            writeln!(metrics, "{}", log.csv_row()).map_err(|e| Error::io(&metrics_path, e))
        });
        if let Err(err) = result {
            return Err(match err {
                Error::NonFinite(what) => Error::Diverged {
                    step: trainer.step() + 1,
                    what,
                    last_good: last_good.as_ref().map_or("none".into(), |p| p.display().to_string()),
                },
                other => other,
            });
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let path = checkpoint_path(out, trainer.epoch());
        trainer.save_checkpoint(&path)?;
        if !val.is_empty() {
            let report = evaluator::evaluate(trainer.generator(), &val)?;
            writeln!(val_log, "{},{},{}", trainer.epoch(), report.mean_psnr, report.mean_ssim)
                .map_err(|e| Error::io(&val_path, e))?;
            if best.is_none_or(|(_, p)| report.mean_psnr > p) {
                best = Some((trainer.epoch(), report.mean_psnr));
                let dst = out.join(CHECKPOINT_DIR).join(BEST_CHECKPOINT);
                std::fs::copy(&path, &dst).map_err(|e| Error::io(&dst, e))?;
            }
        }
        log::info!("epoch {} done ({} steps)", trainer.epoch(), trainer.step());
        last_good = Some(path);
    }
    let last_checkpoint = match last_good {
        Some(p) => p,
        None => {
            let p = checkpoint_path(out, trainer.epoch());
            trainer.save_checkpoint(&p)?;
            p
        }
    };
    let summary = TrainSummary {
        last_checkpoint,
        last_epoch: trainer.epoch(),
        best,
        steps: trainer.step(),
    };
    let selection = format!(
        "last = \"{}\"\nlast_epoch = {}\n{}",
        summary.last_checkpoint.display(),
        summary.last_epoch,
        summary
            .best
            .map_or(String::new(), |(e, p)| format!("best_epoch = {e}\nbest_val_psnr = {p}\n"))
    );
    let sel_path = out.join("selection.toml");
    std::fs::write(&sel_path, selection).map_err(|e| Error::io(&sel_path, e))?;
    Ok(summary)
}
