//! Two-frame adversarial training.
//!
//! Each step runs both composites of a pair through the generator, warps the
//! first output onto the second with the ground-truth flow, updates the
//! generator on reconstruction + temporal + adversarial loss, then updates
//! the discriminator with the generator frozen.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use harmonizer_nn::{Adam, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_seed, DatasetManifest, SamplePair, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, EvalOptions};
use crate::flow::{warp_var, FlowField};
use crate::losses::{
    adversarial_generator, adversarial_generator_var, discriminator_loss_var, generator_total,
    global_temporal_var, reconstruction_var, regional_temporal_var, LossReport, LossWeights,
};
use crate::networks::{
    check_spatial, AdamState, DiscriminatorConfig, GeneratorConfig, ModelBundle, OptimizerState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Temporal loss restricted to the foreground mask.
    Regional,
    /// Temporal loss over the whole frame.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Side length frames are resized to; must be divisible by `2^depth`.
    pub resolution: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop early after this many total steps.
    pub max_steps: Option<u64>,
    pub weights: LossWeights,
    pub temporal: TemporalMode,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Zero freezes the discriminator.
    pub d_steps_per_g_step: usize,
    /// Steps at the start of training with the adversarial term switched off.
    pub warmup_steps_without_adv: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Evaluate on the validation split after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 1,
            epochs: 45,
            max_steps: None,
            weights: LossWeights::default(),
            temporal: TemporalMode::Regional,
            seed: 0,
            checkpoint_every: 1000,
            d_steps_per_g_step: 1,
            warmup_steps_without_adv: 0,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        let depth = self.generator.depth.max(self.discriminator.depth);
        check_spatial(self.resolution, self.resolution, depth).map_err(|_| {
            Error::Config(format!(
                "resolution {} is not divisible by 2^{depth}",
                self.resolution
            ))
        })
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr as f32,
            beta1: self.adam_beta1 as f32,
            beta2: self.adam_beta2 as f32,
            ..AdamConfig::default()
        }
    }
}

/// Resize every part of a pair to `size x size`: bilinear for frames,
/// nearest for masks, flow vectors rescaled with the image.
pub fn resize_pair(pair: &SamplePair, size: usize) -> SamplePair {
    if pair.dims() == (size, size) {
        return pair.clone();
    }
    SamplePair {
        gt_1: pair.gt_1.resize_bilinear(size, size),
        gt_2: pair.gt_2.resize_bilinear(size, size),
        comp_1: pair.comp_1.resize_bilinear(size, size),
        comp_2: pair.comp_2.resize_bilinear(size, size),
        mask_1: pair.mask_1.resize_nearest(size, size),
        mask_2: pair.mask_2.resize_nearest(size, size),
        flow_2_to_1: pair.flow_2_to_1.resize(size, size),
        valid_2: pair.valid_2.resize_nearest(size, size),
        meta: pair.meta.clone(),
    }
}

/// Network-ready tensors for one pair; colors in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub comp_1: Tensor,
    pub comp_2: Tensor,
    pub gt_1: Tensor,
    pub gt_2: Tensor,
    pub mask_1: Tensor,
    pub mask_2: Tensor,
    pub valid_2: Tensor,
    pub flow: FlowField,
}

pub fn preprocess(pair: &SamplePair, resolution: usize) -> Prepared {
    let p = resize_pair(pair, resolution);
    Prepared {
        comp_1: p.comp_1.to_signed_tensor(),
        comp_2: p.comp_2.to_signed_tensor(),
        gt_1: p.gt_1.to_signed_tensor(),
        gt_2: p.gt_2.to_signed_tensor(),
        mask_1: p.mask_1.to_tensor(),
        mask_2: p.mask_2.to_tensor(),
        valid_2: p.valid_2.to_tensor(),
        flow: p.flow_2_to_1,
    }
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let [_, c, h, w] = parts[0].shape();
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for t in parts {
        assert_eq!(t.shape()[1..], [c, h, w], "stack: mismatched shapes");
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([parts.len(), c, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub losses: LossReport,
    /// Seconds since the training run started.
    pub wall_time: f64,
}

/// What the generator sub-step leaves for the discriminator.
pub struct GeneratorStep {
    pub report: LossReport,
    /// Harmonized second frames, detached.
    pub fake: Tensor,
    adversarial_computed: bool,
}

/// Owns the networks and optimizers for the duration of a run.
pub struct Trainer {
    cfg: TrainConfig,
    bundle: ModelBundle,
    g_opt: Adam,
    d_opt: Adam,
}

impl Trainer {
    /// Resume optimizer moments from the bundle when it carries them.
    pub fn new(cfg: TrainConfig, bundle: ModelBundle) -> Result<Self> {
        cfg.validate()?;
        let adam = cfg.adam();
        let (g_opt, d_opt) = match &bundle.optimizer {
            Some(state) => {
                let restore = |s: &AdamState, store| {
                    Adam::from_state(adam, store, s.step, s.first.clone(), s.second.clone())
                        .ok_or_else(|| {
                            Error::Validation("optimizer state does not match the networks".into())
                        })
                };
                (
                    restore(&state.generator, bundle.generator.params())?,
                    restore(&state.discriminator, bundle.discriminator.params())?,
                )
            }
            None => (
                Adam::new(adam, bundle.generator.params()),
                Adam::new(adam, bundle.discriminator.params()),
            ),
        };
        Ok(Self {
            cfg,
            bundle,
            g_opt,
            d_opt,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn bundle_mut(&mut self) -> &mut ModelBundle {
        &mut self.bundle
    }

    /// The bundle with current optimizer state attached.
    pub fn snapshot(&self) -> ModelBundle {
        let mut bundle = self.bundle.clone();
        bundle.optimizer = Some(self.optimizer_state());
        bundle
    }

    pub fn into_bundle(mut self) -> ModelBundle {
        self.bundle.optimizer = Some(self.optimizer_state());
        self.bundle
    }

    fn optimizer_state(&self) -> OptimizerState {
        let state = |opt: &Adam| AdamState {
            step: opt.steps(),
            first: opt.first_moments().to_vec(),
            second: opt.second_moments().to_vec(),
        };
        OptimizerState {
            generator: state(&self.g_opt),
            discriminator: state(&self.d_opt),
        }
    }

    /// Update the generator on the two-frame objective with `D` frozen.
    pub fn generator_step(&mut self, batch: &[&Prepared]) -> Result<GeneratorStep> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let field =
            |f: fn(&Prepared) -> &Tensor| stack(&batch.iter().map(|p| f(p)).collect::<Vec<_>>());
        let mask_2 = field(|p| &p.mask_2);
        let flows: Vec<FlowField> = batch.iter().map(|p| p.flow.clone()).collect();
        let gen = &self.bundle.generator;
        let disc = &self.bundle.discriminator;
        let weights = self.cfg.weights;
        let adv_weight = if self.bundle.step < self.cfg.warmup_steps_without_adv {
            0.0
        } else {
            weights.lambda2
        };

        let mut g = Graph::new();
        let gp = gen.params().bind(&mut g, true);
        let comp_1 = g.constant(field(|p| &p.comp_1));
        let comp_2 = g.constant(field(|p| &p.comp_2));
        let gt_1 = g.constant(field(|p| &p.gt_1));
        let gt_2 = g.constant(field(|p| &p.gt_2));
        let m1 = g.constant(field(|p| &p.mask_1));
        let m2 = g.constant(mask_2.clone());
        let (o1, _) = gen.forward(&mut g, &gp, comp_1, m1)?;
        let (o2, _) = gen.forward(&mut g, &gp, comp_2, m2)?;
        let r1 = reconstruction_var(&mut g, o1, gt_1)?;
        let r2 = reconstruction_var(&mut g, o2, gt_2)?;

        let (warped, inside) = warp_var(&mut g, o1, &flows)?;
        let mut valid = field(|p| &p.valid_2);
        for (chunk, inside) in valid
            .data_mut()
            .chunks_mut(inside[0].data().len())
            .zip(&inside)
        {
            for (v, i) in chunk.iter_mut().zip(inside.data()) {
                *v *= i;
            }
        }
        let (temporal, degenerate) = match self.cfg.temporal {
            TemporalMode::Regional => regional_temporal_var(&mut g, o2, warped, &mask_2, &valid)?,
            TemporalMode::Global => global_temporal_var(&mut g, o2, warped, &valid)?,
        };

        let mut terms = vec![(r1, 0.5), (r2, 0.5)];
        if weights.lambda1 > 0.0 {
            terms.push((temporal, weights.lambda1 as f32));
        }
        let mut adversarial = None;
        if adv_weight > 0.0 {
            let dp = disc.params().bind(&mut g, false);
            let d_fake = disc.forward(&mut g, &dp, o2)?;
            let adv = adversarial_generator_var(&mut g, d_fake);
            terms.push((adv, adv_weight as f32));
            adversarial = Some(adv);
        }
        let total = g.weighted_sum(&terms);

        let value = |v| g.value(v).item() as f64;
        let reconstruction = 0.5 * (value(r1) + value(r2));
        let regional_temporal = value(temporal);
        let adversarial_g = adversarial.map(value).unwrap_or(0.0);
        let report = LossReport {
            reconstruction,
            regional_temporal,
            adversarial_g,
            total_g: generator_total(
                reconstruction,
                regional_temporal,
                adversarial_g,
                LossWeights {
                    lambda1: weights.lambda1,
                    lambda2: adv_weight,
                },
            ),
            degenerate_foreground: degenerate,
            ..LossReport::default()
        };
        if !value(total).is_finite() || !report.total_g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite generator loss at step {}: {report:?}",
                self.bundle.step + 1
            )));
        }
        let grads = g.backward(total);
        let grads: Vec<_> = gp.vars().iter().map(|&v| grads.get(v)).collect();
        self.g_opt.step(self.bundle.generator.params_mut(), &grads);
        Ok(GeneratorStep {
            report,
            fake: g.value(o2).clone(),
            adversarial_computed: adversarial.is_some(),
        })
    }

    /// Update the discriminator with `G` frozen. `fake` is the harmonized
    /// second frame from [`Trainer::generator_step`]. Returns the three
    /// loss terms (fake output, fake input, real) and the mean squared score
    /// on `fake` before the update.
    pub fn discriminator_step(
        &mut self,
        batch: &[&Prepared],
        fake: &Tensor,
    ) -> Result<([f64; 3], f64)> {
        let field =
            |f: fn(&Prepared) -> &Tensor| stack(&batch.iter().map(|p| f(p)).collect::<Vec<_>>());
        let mask = field(|p| &p.mask_2);
        let disc = &self.bundle.discriminator;
        let mut g = Graph::new();
        let dp = disc.params().bind(&mut g, true);
        let fake = g.constant(fake.clone());
        let comp = g.constant(field(|p| &p.comp_2));
        let real = g.constant(field(|p| &p.gt_2));
        let d_fake = disc.forward(&mut g, &dp, fake)?;
        let d_comp = disc.forward(&mut g, &dp, comp)?;
        let d_real = disc.forward(&mut g, &dp, real)?;
        let (loss, terms) = discriminator_loss_var(&mut g, d_fake, d_comp, d_real, &mask)?;
        let adv = adversarial_generator(g.value(d_fake).data()) as f64;
        if !g.value(loss).item().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite discriminator loss at step {}: {terms:?}",
                self.bundle.step + 1
            )));
        }
        let grads = g.backward(loss);
        let grads: Vec<_> = dp.vars().iter().map(|&v| grads.get(v)).collect();
        self.d_opt
            .step(self.bundle.discriminator.params_mut(), &grads);
        Ok((terms.map(f64::from), adv))
    }

    /// One full step: generator update, then `d_steps_per_g_step`
    /// discriminator updates. Advances the step counter.
    pub fn train_step(&mut self, batch: &[&Prepared]) -> Result<LossReport> {
        let gen_step = self.generator_step(batch)?;
        let mut report = gen_step.report;
        for i in 0..self.cfg.d_steps_per_g_step {
            let (terms, adv) = self.discriminator_step(batch, &gen_step.fake)?;
            if i == 0 {
                [report.d_fake_out, report.d_fake_in, report.d_real] = terms;
                if !gen_step.adversarial_computed {
                    report.adversarial_g = adv;
                }
            }
        }
        self.bundle.step += 1;
        Ok(report)
    }
}

/// Per-epoch validation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: u64,
    pub step: u64,
    pub psnr: f64,
    pub mse: f64,
    pub lt1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where logs and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this bundle (counters and optimizer state included).
    pub resume: Option<ModelBundle>,
    /// Keep preprocessed training samples in memory between epochs.
    pub cache_samples: bool,
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub records: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const VALIDATION_LOG_FILE: &str = "val_log.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

struct Logs {
    dir: PathBuf,
    steps: BufWriter<File>,
    validation: BufWriter<File>,
}

impl Logs {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(BufWriter::new(file))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            steps: open(LOG_FILE)?,
            validation: open(VALIDATION_LOG_FILE)?,
        })
    }

    fn line<T: Serialize>(
        dir: &Path,
        out: &mut BufWriter<File>,
        name: &str,
        value: &T,
    ) -> Result<()> {
        let path = dir.join(name);
        let json = serde_json::to_string(value).map_err(|e| Error::json(&path, e))?;
        writeln!(out, "{json}")
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&path, e))
    }

    fn step(&mut self, record: &StepRecord) -> Result<()> {
        Self::line(&self.dir, &mut self.steps, LOG_FILE, record)
    }

    fn validation(&mut self, record: &ValidationRecord) -> Result<()> {
        Self::line(&self.dir, &mut self.validation, VALIDATION_LOG_FILE, record)
    }
}

/// Train on the manifest's train split, validating on its val split after
/// each epoch.
pub fn train(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let entries: Vec<_> = manifest.split(Split::Train).cloned().collect();
    if entries.is_empty() {
        return Err(Error::Validation("the train split is empty".into()));
    }
    let resuming = options.resume.is_some();
    let bundle = match options.resume {
        Some(bundle) => {
            if bundle.generator.config() != &cfg.generator
                || bundle.discriminator.config() != &cfg.discriminator
            {
                return Err(Error::Config(
                    "checkpoint architecture differs from the training config".into(),
                ));
            }
            bundle
        }
        None => ModelBundle::new(cfg.generator.clone(), cfg.discriminator.clone(), cfg.seed)?,
    };
    if bundle.epoch >= cfg.epochs {
        return Ok(TrainOutcome {
            bundle,
            records: Vec::new(),
            validation: Vec::new(),
        });
    }

    let mut logs = match &options.out_dir {
        Some(dir) => Some(Logs::open(dir, resuming)?),
        None => None,
    };
    let save = |bundle: &ModelBundle, name: &str| -> Result<()> {
        match &options.out_dir {
            Some(dir) => bundle.save(&dir.join(name)),
            None => Ok(()),
        }
    };

    let mut trainer = Trainer::new(cfg.clone(), bundle)?;
    let mut cache: HashMap<usize, Prepared> = HashMap::new();
    let mut records = Vec::new();
    let mut validation = Vec::new();
    let mut best_psnr = f64::NEG_INFINITY;
    let started = Instant::now();
    let has_val = cfg.validate && manifest.count(Split::Val) > 0;

    'epochs: while trainer.bundle().epoch < cfg.epochs {
        let epoch = trainer.bundle().epoch;
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch)));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let skip = trainer.bundle().epoch_step as usize;
        for indices in batches.iter().skip(skip) {
            if cfg.max_steps.is_some_and(|m| trainer.bundle().step >= m) {
                break 'epochs;
            }
            let mut loaded = Vec::with_capacity(indices.len());
            for &i in *indices {
                let prepared = match cache.remove(&i) {
                    Some(p) => p,
                    None => preprocess(&manifest.load(&entries[i])?, cfg.resolution),
                };
                loaded.push((i, prepared));
            }
            let batch: Vec<&Prepared> = loaded.iter().map(|(_, p)| p).collect();
            let report = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    save(&trainer.snapshot(), "diverged.ckpt")?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if options.cache_samples {
                cache.extend(loaded);
            }
            trainer.bundle_mut().epoch_step += 1;
            let record = StepRecord {
                step: trainer.bundle().step,
                epoch,
                losses: report,
                wall_time: started.elapsed().as_secs_f64(),
            };
            log::debug!("step {} {:?}", record.step, record.losses);
            if let Some(logs) = &mut logs {
                logs.step(&record)?;
            }
            records.push(record);
            if trainer.bundle().step % cfg.checkpoint_every == 0 {
                save(&trainer.snapshot(), LATEST_CHECKPOINT)?;
            }
        }
        let bundle = trainer.bundle_mut();
        bundle.epoch += 1;
        bundle.epoch_step = 0;

        if has_val {
            let report = evaluate_split(
                &trainer.bundle().generator,
                manifest,
                Split::Val,
                &EvalOptions {
                    resolution: Some(cfg.resolution),
                    ..EvalOptions::default()
                },
            )?;
            let record = ValidationRecord {
                epoch,
                step: trainer.bundle().step,
                psnr: report.psnr,
                mse: report.mse,
                lt1: report.lt1,
            };
            log::info!(
                "epoch {epoch}: val psnr {:.2} dB, mse {:.5}, L_T1 {:.5}",
                record.psnr,
                record.mse,
                record.lt1
            );
            if let Some(logs) = &mut logs {
                logs.validation(&record)?;
            }
            if record.psnr > best_psnr {
                best_psnr = record.psnr;
                save(&trainer.snapshot(), BEST_CHECKPOINT)?;
            }
            validation.push(record);
        }
    }

    let bundle = trainer.into_bundle();
    save(&bundle, LATEST_CHECKPOINT)?;
    save(&bundle, FINAL_CHECKPOINT)?;
    Ok(TrainOutcome {
        bundle,
        records,
        validation,
    })
}
