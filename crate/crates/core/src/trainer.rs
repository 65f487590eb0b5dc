//! Two-phase training loop: MSE-only generator pretraining, then
//! alternating discriminator/generator updates with the full objective.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{load_extractor, ExtractorMode, FeatureExtractor};
use crate::image::{load_image, ImageTensor};
use crate::networks::{
    load_checkpoint, save_checkpoint, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig,
};
use crate::obb::{load_obb, masks_from_obb, OBBLabel};
use crate::objectives::{
    adversarial_d, adversarial_g, total_generator_loss_grad, LossReport, LossWeights, PROB_EPS,
};
use crate::patch::{sample_patch_pair_sized, PatchPair, SCALE};

fn default_pretrain_epochs() -> usize {
    25
}
fn default_main_epochs() -> usize {
    55
}
fn default_lr0() -> f64 {
    1e-3
}
fn default_lr_decay_factor() -> f64 {
    0.1
}
fn default_lr_decay_every() -> usize {
    20
}
fn default_batch_size() -> usize {
    16
}
fn default_patch_size() -> usize {
    96
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_main_epochs")]
    pub main_epochs: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_decay_factor")]
    pub lr_decay_factor: f64,
    /// decay counted over the combined pretrain + main timeline
    #[serde(default = "default_lr_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        serde_json::from_value(serde_json::json!({})).expect("all fields defaulted")
    }
}

impl TrainSchedule {
    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.main_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.patch_size == 0 || self.patch_size % SCALE != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch_size {} is not a positive multiple of {SCALE}",
                self.patch_size
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::InvalidArgument("lr_decay_every must be positive".into()));
        }
        Ok(())
    }
}

/// lr(e) = lr0 * factor^floor(e / every), e over the combined timeline.
pub fn lr_at(schedule: &TrainSchedule, epoch: usize) -> f64 {
    schedule.lr0 * schedule.lr_decay_factor.powi((epoch / schedule.lr_decay_every) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adversarial,
}

fn default_extractor() -> ExtractorMode {
    ExtractorMode::Surrogate { seed: 0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_extractor")]
    pub extractor: ExtractorMode,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            weights: LossWeights::default(),
            extractor: ExtractorMode::Surrogate { seed: 0 },
        }
    }
}

/// One log line per optimization step (JSON lines on disk).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub total: f64,
    pub mse: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub perc_boundary: f64,
    pub perc_background: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub hr: PathBuf,
    pub obb: PathBuf,
}

/// JSON-lines manifest; relative paths resolve against the manifest dir.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if entry.hr.is_relative() {
            entry.hr = base.join(&entry.hr);
        }
        if entry.obb.is_relative() {
            entry.obb = base.join(&entry.obb);
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            line: 0,
            reason: "no entries".into(),
        });
    }
    Ok(entries)
}

/// All training images held in memory (desk-scale corpora).
pub struct Dataset {
    pub items: Vec<(ImageTensor, OBBLabel)>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let mut items = Vec::new();
        for entry in load_manifest(manifest_path)? {
            let hr = load_image(&entry.hr)?;
            let obb = load_obb(&entry.obb)?;
            if obb.height() != hr.height() || obb.width() != hr.width() {
                return Err(Error::DimensionMismatch(format!(
                    "{}: obb {}x{} vs image {}x{}",
                    entry.obb.display(),
                    obb.height(),
                    obb.width(),
                    hr.height(),
                    hr.width()
                )));
            }
            items.push((hr, obb));
        }
        Ok(Self { items })
    }
}

fn batch_to_chw(images: &[&Array3<f64>]) -> Array4<f64> {
    let (h, w, c) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        let mut dst = out.index_axis_mut(Axis(0), i);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    dst[[ch, y, x]] = img[[y, x, ch]];
                }
            }
        }
    }
    out
}

fn sample_to_hwc(batch: &Array4<f64>, i: usize) -> Array3<f64> {
    let (_, c, h, w) = batch.dim();
    let src = batch.index_axis(Axis(0), i);
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| src[[ch, y, x]])
}

fn hwc_to_chw(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| img[[y, x, ch]])
}

pub struct Trainer {
    pub cfg: TrainerConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    g_opt: crate::nn::Adam,
    d_opt: crate::nn::Adam,
    pub extractor: FeatureExtractor,
    extractor_checksum: [u8; 32],
    rng: ChaCha20Rng,
    /// completed epochs
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig) -> Result<Self> {
        cfg.schedule.validate()?;
        cfg.generator.validate()?;
        if cfg.generator.scale != SCALE {
            return Err(Error::InvalidArgument(format!(
                "trainer assumes scale {SCALE}, generator config says {}",
                cfg.generator.scale
            )));
        }
        if cfg.schedule.main_epochs > 0
            && cfg.discriminator.input_size != cfg.schedule.patch_size
        {
            return Err(Error::InvalidArgument(format!(
                "discriminator input size {} must equal the HR patch size {}",
                cfg.discriminator.input_size, cfg.schedule.patch_size
            )));
        }
        let seed = cfg.schedule.seed;
        let generator = Generator::init(cfg.generator, seed)?;
        let discriminator = Discriminator::init(cfg.discriminator, seed.wrapping_add(1))?;
        let extractor = load_extractor(&cfg.extractor)?;
        let extractor_checksum = extractor.weights_checksum();
        let s = &cfg.schedule;
        Ok(Self {
            g_opt: crate::nn::Adam::new(s.beta1, s.beta2, s.adam_eps),
            d_opt: crate::nn::Adam::new(s.beta1, s.beta2, s.adam_eps),
            rng: ChaCha20Rng::seed_from_u64(seed.wrapping_add(2)),
            cfg,
            generator,
            discriminator,
            extractor,
            extractor_checksum,
            epoch: 0,
            step: 0,
        })
    }

    /// Restore a trainer from a checkpoint; `cfg` must match the stored
    /// config snapshot exactly.
    pub fn resume(cfg: TrainerConfig, ckpt: &Path) -> Result<Self> {
        let mut trainer = Self::new(cfg)?;
        let meta = load_checkpoint(
            ckpt,
            &mut trainer.generator,
            &mut trainer.discriminator,
            &mut trainer.g_opt,
            &mut trainer.d_opt,
        )?;
        let ckpt_err = |reason: String| Error::Checkpoint {
            path: ckpt.to_path_buf(),
            reason,
        };
        let stored: TrainerConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| ckpt_err("missing config snapshot".into()))?,
        )
        .map_err(|e| ckpt_err(format!("bad config snapshot: {e}")))?;
        if stored != trainer.cfg {
            return Err(ckpt_err("resume/config mismatch".into()));
        }
        trainer.epoch = meta
            .get("epoch")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ckpt_err("missing epoch".into()))? as usize;
        trainer.step = meta
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ckpt_err("missing step".into()))?;
        trainer.rng = serde_json::from_value(
            meta.get("rng")
                .cloned()
                .ok_or_else(|| ckpt_err("missing rng state".into()))?,
        )
        .map_err(|e| ckpt_err(format!("bad rng state: {e}")))?;
        Ok(trainer)
    }

    pub fn phase(&self) -> Phase {
        if self.epoch < self.cfg.schedule.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Adversarial
        }
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(&self.cfg.schedule, self.epoch)
    }

    fn check_finite(&self, values: &[(&str, f64)], lr: f64) -> Result<()> {
        for (name, v) in values {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    lr,
                    detail: format!("{name} = {v}"),
                });
            }
        }
        Ok(())
    }

    /// One generator Adam step on pixel-wise MSE only.
    pub fn pretrain_step(&mut self, batch: &[PatchPair]) -> Result<StepLog> {
        let lr = self.current_lr();
        let lr_imgs: Vec<&Array3<f64>> = batch.iter().map(|p| p.lr.data()).collect();
        let hr_imgs: Vec<&Array3<f64>> = batch.iter().map(|p| p.hr.data()).collect();
        let lr4 = batch_to_chw(&lr_imgs);
        let hr4 = batch_to_chw(&hr_imgs);
        let (sr4, cache) = self.generator.forward_train(&lr4)?;
        let n = sr4.len() as f64;
        let mut grad = Array4::zeros(sr4.raw_dim());
        let mut mse = 0.0;
        for ((g, a), b) in grad.iter_mut().zip(sr4.iter()).zip(hr4.iter()) {
            let d = a - b;
            mse += d * d;
            *g = 2.0 * d / n;
        }
        mse /= n;
        self.check_finite(&[("mse", mse)], lr)?;
        self.generator.backward(&cache, &grad);
        self.g_opt.step(lr, &mut self.generator.trainables());
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            total: mse,
            mse,
            adv_g: 0.0,
            adv_d: 0.0,
            perc_boundary: 0.0,
            perc_background: 0.0,
            lr,
        })
    }

    /// One discriminator step on the adversarial loss, then one generator
    /// step on the full objective.
    pub fn adversarial_step(&mut self, batch: &[PatchPair]) -> Result<StepLog> {
        let lr = self.current_lr();
        let n = batch.len();
        let nf = n as f64;
        let lr_imgs: Vec<&Array3<f64>> = batch.iter().map(|p| p.lr.data()).collect();
        let hr_imgs: Vec<&Array3<f64>> = batch.iter().map(|p| p.hr.data()).collect();
        let lr4 = batch_to_chw(&lr_imgs);
        let hr4 = batch_to_chw(&hr_imgs);
        let (sr4, g_cache) = self.generator.forward_train(&lr4)?;

        // discriminator update on real and (detached) fake batches
        let (p_real, c_real) = self.discriminator.forward_train(&hr4)?;
        let (p_fake, c_fake) = self.discriminator.forward_train(&sr4)?;
        let adv_d = adversarial_d(&p_real, &p_fake);
        self.check_finite(&[("adv_d", adv_d)], lr)?;
        let gp_real: Vec<f64> = p_real
            .iter()
            .map(|p| -1.0 / (nf * p.clamp(PROB_EPS, 1.0 - PROB_EPS)))
            .collect();
        let gp_fake: Vec<f64> = p_fake
            .iter()
            .map(|p| 1.0 / (nf * (1.0 - p.clamp(PROB_EPS, 1.0 - PROB_EPS))))
            .collect();
        self.discriminator.backward(&c_real, &gp_real);
        self.discriminator.backward(&c_fake, &gp_fake);
        self.d_opt.step(lr, &mut self.discriminator.trainables());

        // generator update against the freshly updated discriminator
        let (p_fake2, c_fake2) = self.discriminator.forward_train(&sr4)?;
        let adv_g = adversarial_g(&p_fake2);
        let gp2: Vec<f64> = p_fake2
            .iter()
            .map(|p| self.cfg.weights.w_adv * -1.0 / (nf * p.clamp(PROB_EPS, 1.0 - PROB_EPS)))
            .collect();
        let mut g_total = self.discriminator.backward(&c_fake2, &gp2);
        // that pass was for the input gradient only; the discriminator
        // must not retain gradients from the generator's step
        self.discriminator.zero_grad();

        let mut mse = 0.0;
        let mut perc_boundary = 0.0;
        let mut perc_background = 0.0;
        for (i, pair) in batch.iter().enumerate() {
            let sr_i = sample_to_hwc(&sr4, i);
            let masks = masks_from_obb(&pair.obb);
            let (report, grad) = total_generator_loss_grad(
                &self.extractor,
                &sr_i,
                pair.hr.data(),
                &masks,
                &self.cfg.weights,
                &[p_fake2[i]],
                true,
            )?;
            mse += report.mse / nf;
            perc_boundary += report.perc_boundary / nf;
            perc_background += report.perc_background / nf;
            let grad_chw = hwc_to_chw(&grad.expect("grad requested"));
            let mut dst = g_total.index_axis_mut(Axis(0), i);
            dst.zip_mut_with(&grad_chw, |a, b| *a += b / nf);
        }
        let report = LossReport::compose(&self.cfg.weights, mse, adv_g, perc_boundary, perc_background);
        self.check_finite(
            &[
                ("total", report.total),
                ("mse", mse),
                ("adv_g", adv_g),
                ("perc_boundary", perc_boundary),
                ("perc_background", perc_background),
            ],
            lr,
        )?;
        self.generator.backward(&g_cache, &g_total);
        self.g_opt.step(lr, &mut self.generator.trainables());
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            total: report.total,
            mse,
            adv_g,
            adv_d,
            perc_boundary,
            perc_background,
            lr,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "phase": self.phase(),
            "config": serde_json::to_value(&self.cfg).expect("serializable config"),
            "rng": serde_json::to_value(&self.rng).expect("serializable rng"),
        });
        save_checkpoint(
            path,
            &self.generator,
            &self.discriminator,
            &self.g_opt,
            &self.d_opt,
            meta,
        )
    }

    fn assert_extractor_frozen(&self) -> Result<()> {
        if self.extractor.weights_checksum() != self.extractor_checksum {
            return Err(Error::Other(
                "feature extractor weights changed during training".into(),
            ));
        }
        Ok(())
    }

    /// Full run: remaining epochs, per-epoch checkpoints in `out_dir`,
    /// per-step JSON log lines appended to `out_dir/train_log.jsonl`.
    /// Returns the final checkpoint path.
    pub fn run(&mut self, data: &Dataset, out_dir: &Path) -> Result<PathBuf> {
        self.run_epochs(data, out_dir, usize::MAX)
    }

    /// As `run`, but stops after at most `max_epochs` additional epochs
    /// (simulating an interruption; the run resumes from the checkpoint).
    pub fn run_epochs(
        &mut self,
        data: &Dataset,
        out_dir: &Path,
        max_epochs: usize,
    ) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
            path: out_dir.to_path_buf(),
            source: e,
        })?;
        let log_path = out_dir.join("train_log.jsonl");
        let mut log_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
        let mut last_ckpt = out_dir.join(format!("epoch_{:04}.ckpt", self.epoch));
        let total = self.cfg.schedule.total_epochs();
        let stop = self.epoch.saturating_add(max_epochs).min(total);
        while self.epoch < stop {
            let phase = self.phase();
            // one random patch per manifest image, visiting images in a
            // shuffled order
            let mut order: Vec<usize> = (0..data.items.len()).collect();
            order.shuffle(&mut self.rng);
            let mut patches = Vec::with_capacity(order.len());
            for idx in order {
                let (hr, obb) = &data.items[idx];
                patches.push(sample_patch_pair_sized(
                    hr,
                    obb,
                    self.cfg.schedule.patch_size,
                    &mut self.rng,
                )?);
            }
            for chunk in patches.chunks(self.cfg.schedule.batch_size) {
                let entry = match phase {
                    Phase::Pretrain => self.pretrain_step(chunk)?,
                    Phase::Adversarial => self.adversarial_step(chunk)?,
                };
                let line = serde_json::to_string(&entry).expect("serializable log entry");
                writeln!(log_file, "{line}").map_err(|e| Error::Io {
                    path: log_path.clone(),
                    source: e,
                })?;
                log::debug!("step {} total {:.6}", entry.step, entry.total);
            }
            self.assert_extractor_frozen()?;
            self.epoch += 1;
            last_ckpt = out_dir.join(format!("epoch_{:04}.ckpt", self.epoch));
            self.save(&last_ckpt)?;
            log::info!(
                "epoch {}/{} done ({:?}), checkpoint {}",
                self.epoch,
                total,
                phase,
                last_ckpt.display()
            );
        }
        Ok(last_ckpt)
    }
}
