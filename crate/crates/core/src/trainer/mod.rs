//! Desk-scale training: ratio labels, homogeneous batches, alternating
//! generator and discriminator AdamW steps, warmup, checkpoints.

pub mod adamw;
pub mod batching;
pub mod synthetic;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{Graph, Tensor};
use crate::calibration::RatioSet;
use crate::complexity::{mse, ImageDescription};
use crate::error::{contract, Error, Result};
use crate::imageio::quantize_8bit;
use crate::losses::{Discriminator, FeatureExtractor, GanLoss, LossWeights, Objective};
use crate::nestedvae::{
    decode_tensor_block, encode_tensor_block, gaussian_noise, Checkpoint, LatentSample, NestedVae,
    NestedVaeConfig, Section,
};

pub use adamw::{clip_global_norm, AdamHyper, AdamW};
pub use batching::{
    assign_ratios, make_batches, write_assignments, Assignment, Batch, FailurePolicy, RatioSampling, ScorerChoice,
};
pub use synthetic::{generate, render, Stratum, StratumMix, SyntheticItem};

pub const METRICS_HEADER: &str = "step,ratio,loss_total,loss_l1,loss_kl,loss_perc,loss_gan,grad_norm,lr";
pub const RECON_HEADER: &str = "id,ratio,mse";

const DISC_TAG: &[u8; 4] = b"DISC";
const OPT_G_TAG: &[u8; 4] = b"OPTG";
const OPT_D_TAG: &[u8; 4] = b"OPTD";
const STATE_TAG: &[u8; 4] = b"TRST";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub gan_start_step: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub gan_loss: GanLoss,
    pub sampling: RatioSampling,
    /// Write an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
            grad_clip: 5.0,
            steps: 2000,
            batch_size: 16,
            gan_start_step: 500,
            warmup_steps: 100,
            seed: 0,
            weights: LossWeights::default(),
            gan_loss: GanLoss::NonSaturating,
            sampling: RatioSampling::Proportional,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("betas ({}, {}) must lie in (0, 1)", self.beta1, self.beta2));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr, eps and weight_decay must be finite and non-negative (eps > 0)".into());
        }
        if self.gan_start_step > self.steps {
            return bad(format!("gan_start_step {} exceeds steps {}", self.gan_start_step, self.steps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Linear warmup to `lr` over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }

    /// Same run apart from the total step count.
    fn compatible_for_resume(&self, other: &TrainConfig) -> bool {
        TrainConfig {
            steps: other.steps,
            gan_start_step: other.gan_start_step,
            checkpoint_every: other.checkpoint_every,
            ..self.clone()
        } == *other
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub id: String,
    pub image: Tensor<f32>,
    pub description: ImageDescription,
    pub ratio: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub records: Vec<LabeledRecord>,
}

impl LabeledDataset {
    pub fn validate(&self, config: &NestedVaeConfig) -> Result<()> {
        let r = config.resolution;
        for rec in &self.records {
            if !config.ratios.contains(rec.ratio) {
                return Err(contract!("record {}: ratio {} not in {}", rec.id, rec.ratio, config.ratios));
            }
            if rec.image.shape() != [3, r, r] {
                return Err(contract!("record {}: image shape {:?}, expected [3, {r}, {r}]", rec.id, rec.image.shape()));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.ratio).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub ratio: u32,
    pub loss_total: f64,
    pub loss_l1: f64,
    pub loss_kl: f64,
    pub loss_perc: f64,
    pub loss_gan: f64,
    pub loss_disc: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub skipped: bool,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.ratio,
            self.loss_total,
            self.loss_l1,
            self.loss_kl,
            self.loss_perc,
            self.loss_gan,
            self.grad_norm,
            self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    config: TrainConfig,
    adapter_updates: [u64; 3],
    skipped_steps: u64,
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derived seed for a (purpose, a, b) triple under the run seed.
pub fn derive_seed(seed: u64, purpose: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed ^ purpose.rotate_left(48)) ^ a) ^ b)
}

const SEED_MODEL: u64 = 1;
const SEED_DISC: u64 = 2;
const SEED_EXTRACTOR: u64 = 3;
const SEED_EPOCH: u64 = 4;
const SEED_NOISE: u64 = 5;

/// All mutable training state.
pub struct Trainer {
    pub model: NestedVae<f32>,
    pub disc: Discriminator<f32>,
    pub extractor: FeatureExtractor<f32>,
    pub opt_g: AdamW<f32>,
    pub opt_d: AdamW<f32>,
    pub config: TrainConfig,
    pub step: u64,
    /// Steps in which each ratio's adapters received a non-zero gradient.
    pub adapter_updates: [u64; 3],
    pub skipped_steps: u64,
    epoch_cache: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    pub fn new(model_config: NestedVaeConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = NestedVae::new(model_config, derive_seed(config.seed, SEED_MODEL, 0, 0))?;
        let disc = Discriminator::new(derive_seed(config.seed, SEED_DISC, 0, 0));
        let extractor = FeatureExtractor::new(derive_seed(config.seed, SEED_EXTRACTOR, 0, 0));
        Ok(Trainer {
            opt_g: AdamW::new(&model.store),
            opt_d: AdamW::new(&disc.store),
            model,
            disc,
            extractor,
            config,
            step: 0,
            adapter_updates: [0; 3],
            skipped_steps: 0,
            epoch_cache: None,
        })
    }

    pub fn ratios(&self) -> RatioSet {
        self.model.config.ratios
    }

    /// The batch scheduled for `step`; epochs are planned from the run seed.
    pub fn batch_for_step(&mut self, labels: &[u32], step: u64) -> Result<Batch> {
        if labels.is_empty() {
            return Err(contract!("cannot train on an empty dataset"));
        }
        let plan0 = make_batches(labels, self.config.batch_size, derive_seed(self.config.seed, SEED_EPOCH, 0, 0), self.config.sampling)?;
        let per_epoch = plan0.len() as u64;
        let epoch = step / per_epoch;
        let cached = matches!(&self.epoch_cache, Some((e, _)) if *e == epoch);
        if !cached {
            let plan = if epoch == 0 {
                plan0
            } else {
                make_batches(labels, self.config.batch_size, derive_seed(self.config.seed, SEED_EPOCH, epoch, 0), self.config.sampling)?
            };
            self.epoch_cache = Some((epoch, plan));
        }
        let plan = &self.epoch_cache.as_ref().expect("filled").1;
        Ok(plan[(step % per_epoch) as usize].clone())
    }

    /// One generator update and, once the GAN phase has started, one
    /// discriminator update on the same batch.
    pub fn train_step(&mut self, dataset: &LabeledDataset, batch: &Batch) -> Result<StepMetrics> {
        let step = self.step;
        let ratio = batch.ratio;
        let n_idx = self.ratios().index_of(ratio)?;
        if batch.indices.is_empty() {
            return Err(contract!("empty batch"));
        }
        if batch.indices.iter().any(|&i| dataset.records[i].ratio != ratio) {
            return Err(contract!("batch is not homogeneous in ratio"));
        }
        let gan_on = step >= self.config.gan_start_step;
        let weights = LossWeights {
            delta: if gan_on { self.config.weights.delta } else { 0.0 },
            ..self.config.weights
        };
        let inv_b = 1.0 / batch.indices.len() as f64;
        let lr = self.config.lr_at(step);
        let mut sums = [0.0f64; 5];
        let mut recons = Vec::with_capacity(batch.indices.len());

        self.model.store.zero_grad();
        let mut finite = true;
        for (k, &i) in batch.indices.iter().enumerate() {
            let rec = &dataset.records[i];
            let side = self.model.config.latent_side(ratio);
            let eps = gaussian_noise(&[self.model.config.latent_channels, side, side], derive_seed(self.config.seed, SEED_NOISE, step, k as u64));
            let objective = Objective {
                weights,
                extractor: &self.extractor,
                discriminator: Some(&self.disc),
                gan: self.config.gan_loss,
            };
            let mut g = Graph::new();
            g.freeze(&self.disc.store);
            g.freeze(&self.extractor.store);
            let x = g.constant(rec.image.clone());
            let f = self.model.forward_graph(&mut g, x, ratio, eps)?;
            let t = objective.generator(&mut g, x, f.recon, f.mu, f.logvar)?;
            let vals = [
                g.scalar(t.total) as f64,
                g.scalar(t.l1) as f64,
                g.scalar(t.kl) as f64,
                g.scalar(t.perceptual) as f64,
                t.gan.map_or(0.0, |v| g.scalar(v) as f64),
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                finite = false;
                break;
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * inv_b;
            }
            let grads = g.backward(t.total, inv_b).param_grads(&g, &self.model.store);
            recons.push(g.value(f.recon).clone());
            drop(g);
            for (id, gr) in grads {
                self.model.store.accumulate(id, &gr);
            }
        }
        if !finite {
            log::warn!("step {step}: non-finite loss, step skipped");
            self.model.store.zero_grad();
            self.skipped_steps += 1;
            self.step += 1;
            return Ok(StepMetrics {
                step,
                ratio,
                loss_total: f64::NAN,
                loss_l1: f64::NAN,
                loss_kl: f64::NAN,
                loss_perc: f64::NAN,
                loss_gan: f64::NAN,
                loss_disc: None,
                grad_norm: f64::NAN,
                lr,
                skipped: true,
            });
        }
        let grad_norm = self.model.store.grad_sq_norm().sqrt();
        let adapters = self.model.adapter_params(ratio)?;
        if adapters.iter().any(|&id| !self.model.store.get(id).grad.data().iter().all(|&v| v == 0.0)) {
            self.adapter_updates[n_idx] += 1;
        }
        clip_global_norm(&mut self.model.store, self.config.grad_clip)?;
        let hp = self.config.adam();
        if !self.opt_g.step(&mut self.model.store, lr, &hp) {
            log::warn!("step {step}: non-finite generator gradient, update skipped");
        }

        let mut loss_disc = None;
        if gan_on {
            self.disc.store.zero_grad();
            let mut total = 0.0;
            for (&i, fake) in batch.indices.iter().zip(recons) {
                let objective = Objective {
                    weights,
                    extractor: &self.extractor,
                    discriminator: Some(&self.disc),
                    gan: self.config.gan_loss,
                };
                let mut g = Graph::new();
                let real = g.constant(dataset.records[i].image.clone());
                let fake = g.constant(fake);
                let l = objective.discriminator(&mut g, real, fake)?;
                total += g.scalar(l) as f64 * inv_b;
                let grads = g.backward(l, inv_b).param_grads(&g, &self.disc.store);
                drop(g);
                for (id, gr) in grads {
                    self.disc.store.accumulate(id, &gr);
                }
            }
            clip_global_norm(&mut self.disc.store, self.config.grad_clip)?;
            if !self.opt_d.step(&mut self.disc.store, lr, &hp) {
                log::warn!("step {step}: non-finite discriminator gradient, update skipped");
            }
            loss_disc = Some(total);
        }
        self.step += 1;
        Ok(StepMetrics {
            step,
            ratio,
            loss_total: sums[0],
            loss_l1: sums[1],
            loss_kl: sums[2],
            loss_perc: sums[3],
            loss_gan: sums[4],
            loss_disc,
            grad_norm,
            lr,
            skipped: false,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        let disc: Vec<(String, Tensor<f32>)> = self.disc.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let state = TrainState {
            step: self.step,
            config: self.config.clone(),
            adapter_updates: self.adapter_updates,
            skipped_steps: self.skipped_steps,
        };
        ck.sections = vec![
            Section {
                tag: *DISC_TAG,
                payload: encode_tensor_block(&disc),
            },
            Section {
                tag: *OPT_G_TAG,
                payload: self.opt_g.to_bytes(&self.model.store),
            },
            Section {
                tag: *OPT_D_TAG,
                payload: self.opt_d.to_bytes(&self.disc.store),
            },
            Section {
                tag: *STATE_TAG,
                payload: serde_json::to_vec(&state).expect("state serializes"),
            },
        ];
        ck
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`];
    /// `config` may differ from the saved one only in step counts.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let need = |tag: &[u8; 4]| {
            ck.section(tag)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks {} section", String::from_utf8_lossy(tag))))
        };
        let state: TrainState = serde_json::from_slice(need(STATE_TAG)?)
            .map_err(|e| Error::Parse(format!("trainer state: {e}")))?;
        if !state.config.compatible_for_resume(&config) {
            return Err(Error::Config("resume config differs from the checkpoint beyond step counts".into()));
        }
        if state.step > config.steps {
            return Err(Error::Config(format!("checkpoint is at step {}, beyond steps {}", state.step, config.steps)));
        }
        let mut t = Trainer::new(ck.config.clone(), config)?;
        t.model.load_params(&ck.params)?;
        t.disc = Discriminator::from_store({
            let mut s = t.disc.store.clone();
            let tensors = decode_tensor_block(need(DISC_TAG)?)?;
            if tensors.len() != s.len() {
                return Err(Error::Parse("discriminator tensor count mismatch".into()));
            }
            for (p, (name, v)) in s.iter_mut().zip(tensors) {
                if p.name != name || p.value.shape() != v.shape() {
                    return Err(Error::Parse(format!("discriminator tensor {name} mismatch")));
                }
                p.value = v;
            }
            s
        })?;
        t.opt_g = AdamW::from_bytes(need(OPT_G_TAG)?, &t.model.store)?;
        t.opt_d = AdamW::from_bytes(need(OPT_D_TAG)?, &t.disc.store)?;
        t.step = state.step;
        t.adapter_updates = state.adapter_updates;
        t.skipped_steps = state.skipped_steps;
        Ok(t)
    }
}

/// MSE between an image and the 8-bit quantized decode of its posterior mean.
pub fn recon_mse(model: &NestedVae<f32>, image: &Tensor<f32>, ratio: u32) -> Result<f64> {
    let d = model.encode(image, ratio)?;
    let y = model.decode(&LatentSample { z: d.mu, ratio })?;
    mse(image, &quantize_8bit(&y))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint_dir: PathBuf,
    pub resume_from: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub recon_path: PathBuf,
    /// Metrics of the steps run in this call.
    pub metrics: Vec<StepMetrics>,
    /// `(id, ratio, mse)` for every record at its assigned ratio.
    pub recon: Vec<(String, u32, f64)>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("step", &self.step).field("config", &self.config).finish()
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) training to `config.steps`, writing `metrics.csv`,
/// `recon.csv`, periodic `step_NNNNNN.catm` and `final.catm`.
pub fn train_loop(
    dataset: &LabeledDataset,
    model_config: &NestedVaeConfig,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    dataset.validate(model_config)?;
    let dir = &opts.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    let _ = std::fs::remove_file(&probe);

    let metrics_path = dir.join("metrics.csv");
    let mut trainer = match &opts.resume_from {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if &ck.config != model_config {
                return Err(Error::Config("resume checkpoint has a different model config".into()));
            }
            let t = Trainer::from_checkpoint(&ck, config.clone())?;
            // Keep logged rows before the resume point.
            let kept: Vec<String> = std::fs::read_to_string(&metrics_path)
                .unwrap_or_default()
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < t.step))
                .map(str::to_string)
                .collect();
            let mut text = format!("{METRICS_HEADER}\n");
            for l in kept {
                text.push_str(&l);
                text.push('\n');
            }
            write_file(&metrics_path, &text)?;
            t
        }
        None => {
            write_file(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
            Trainer::new(model_config.clone(), config.clone())?
        }
    };

    let labels = dataset.labels();
    let mut log_file = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = Vec::new();
    while trainer.step < config.steps {
        let batch = trainer.batch_for_step(&labels, trainer.step)?;
        let m = trainer.train_step(dataset, &batch)?;
        if !m.skipped {
            writeln!(log_file, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        }
        log::info!("step {} ratio {} loss {:.5}", m.step, m.ratio, m.loss_total);
        metrics.push(m);
        if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 && trainer.step < config.steps {
            trainer.checkpoint().save(&dir.join(format!("step_{:06}.catm", trainer.step)))?;
        }
    }
    log_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = dir.join("final.catm");
    trainer.checkpoint().save(&final_checkpoint)?;

    let mut recon = Vec::with_capacity(dataset.records.len());
    let mut text = format!("{RECON_HEADER}\n");
    for rec in &dataset.records {
        let m = recon_mse(&trainer.model, &rec.image, rec.ratio)?;
        text.push_str(&format!("{},{},{}\n", rec.id, rec.ratio, m));
        recon.push((rec.id.clone(), rec.ratio, m));
    }
    let recon_path = dir.join("recon.csv");
    write_file(&recon_path, &text)?;
    Ok(TrainOutcome {
        trainer,
        final_checkpoint,
        metrics_path,
        recon_path,
        metrics,
        recon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig {
            warmup_steps: 100,
            lr: 1e-4,
            ..Default::default()
        };
        assert!((c.lr_at(50) - 0.5e-4).abs() < 1e-9);
        assert_eq!(c.lr_at(100), 1e-4);
        assert_eq!(c.lr_at(5000), 1e-4);
        let bad = TrainConfig {
            gan_start_step: 5000,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeds_differ_by_purpose() {
        assert_ne!(derive_seed(0, 1, 0, 0), derive_seed(0, 2, 0, 0));
        assert_ne!(derive_seed(0, 5, 1, 0), derive_seed(0, 5, 0, 1));
    }
}
