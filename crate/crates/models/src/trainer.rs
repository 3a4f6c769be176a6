//! Denoising training: text-only pretraining on whole images, then
//! inpainting finetuning under a mask policy.

use std::io::Write;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use inpaintkit_core::maskpolicy::{boxes_for_image, sample_mask, Detector, MaskPolicy, MaskPolicyConfig};
use inpaintkit_core::scenegen::{corpus_sample, full_prompt, TrainingSample, CANVAS};
use inpaintkit_core::vocab::Tokenizer;
use inpaintkit_core::{Exec, ImageBuffer, MaskBuffer, RngStream};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::denoiser::{conditioning_tensor, image_to_chw, tokens_tensor, ConditioningInput, Denoiser, Stage};
use crate::diffusion::NoiseSchedule;
use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub policy: MaskPolicyConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Zero steps returns the initialization unchanged.
    pub steps: usize,
    pub warmup_steps: usize,
    pub conditioning_dropout: f64,
    pub seed: u64,
    pub stage: Stage,
    pub corpus_size: u64,
    pub corpus_seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            policy: MaskPolicyConfig::default(),
            batch_size: 8,
            learning_rate: 1e-3,
            steps: 2000,
            warmup_steps: 100,
            conditioning_dropout: 0.1,
            seed: 0,
            stage: Stage::Base,
            corpus_size: 4096,
            corpus_seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conditioning_dropout) {
            return Err(ModelError::Config(format!(
                "conditioning dropout {} outside [0, 1]",
                self.conditioning_dropout
            )));
        }
        if self.batch_size == 0 || self.corpus_size == 0 || self.log_every == 0 {
            return Err(ModelError::Config("batch size, corpus size and log interval must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!("learning rate {}", self.learning_rate)));
        }
        self.policy.validate((CANVAS, CANVAS))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn with_policy(&self, policy: MaskPolicy) -> Self {
        Self {
            policy: MaskPolicyConfig {
                policy,
                ..self.policy.clone()
            },
            ..self.clone()
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// `{stage}-{policy}-{hash}.ckpt`; `policy` is `text` for pretraining.
    pub fn checkpoint_name(&self, conditioned: bool) -> String {
        let policy = if conditioned { self.policy.policy.as_str() } else { "text" };
        format!("{}-{}-{}.ckpt", self.stage.as_str(), policy, &self.hash()[..12])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub cond: ConditioningInput,
    pub target: ImageBuffer,
    pub mask_box: Option<inpaintkit_core::BoundingBox>,
}

/// Draws a mask from the configured policy and pairs the masked image with
/// the scene caption, replaced by the null sequence with probability
/// `conditioning_dropout`.
pub fn make_training_example(
    sample: &TrainingSample,
    cfg: &TrainConfig,
    tokenizer: &Tokenizer,
    detector: Option<&dyn Detector>,
    rng: &RngStream,
) -> Result<TrainingExample> {
    let canvas = sample.image.shape();
    let boxes = boxes_for_image(sample, detector);
    let m = sample_mask(canvas, &boxes, &cfg.policy, &rng.child("mask"))?;
    let drop = rng.child("dropout").rng().random::<f64>() < cfg.conditioning_dropout;
    let tokens = match (&sample.scene, drop) {
        (Some(scene), false) => tokenizer.encode(&full_prompt(scene)?.text),
        _ => tokenizer.null_sequence(),
    };
    Ok(TrainingExample {
        cond: ConditioningInput::new(&sample.image, &m.mask, tokens)?,
        target: sample.image.clone(),
        mask_box: m.chosen_box,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub policy: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub losses: Vec<f64>,
    pub checkpoint_name: String,
    pub config_hash: String,
}

/// A batch in tensor form.
pub struct Batch {
    pub latent: Tensor,
    pub t: Vec<usize>,
    pub cond: Option<Tensor>,
    pub tokens: Tensor,
    pub noise: Tensor,
}

/// Target image at the stage resolution plus, for SR, the upsampled
/// low-resolution copy, channels first.
fn stage_planes(model: &Denoiser, image: &ImageBuffer) -> Result<(Vec<f32>, Vec<f32>)> {
    let cfg = model.config();
    let r = model.resolution();
    let (h, _) = image.shape();
    match model.stage() {
        Stage::Base => Ok((image_to_chw(&image.downsample_area(h / r)?), Vec::new())),
        Stage::Sr => {
            let f = cfg.sr_resolution / cfg.base_resolution;
            let low = image.downsample_area(h / cfg.base_resolution)?.upsample_nearest(f)?;
            Ok((image_to_chw(&image.downsample_area(h / r)?), image_to_chw(&low)))
        }
    }
}

/// Conditioning from a finer canvas, box-filtered down; a coarse mask pixel
/// is set if any pixel under it is.
fn fit_conditioning(cond: &ConditioningInput, resolution: usize) -> Result<ConditioningInput> {
    let (h, _) = cond.mask.shape();
    if h == resolution || h % resolution != 0 {
        return Ok(cond.clone());
    }
    let mask = cond.mask.downsample_any(h / resolution)?;
    let image = cond.masked_image.downsample_area(h / resolution)?;
    ConditioningInput::new(&image, &mask, cond.text_tokens.clone())
}

pub fn make_batch(
    model: &Denoiser,
    examples: &[TrainingExample],
    schedule: &NoiseSchedule,
    rng: &RngStream,
) -> Result<Batch> {
    let cfg = model.config();
    let r = model.resolution();
    let plane = 3 * r * r;
    let dev = Device::Cpu;
    let mut latent = Vec::new();
    let mut noise = Vec::new();
    let mut ts = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let (x0, low) = stage_planes(model, &ex.target)?;
        let mut g = rng.rng_at(i as u64);
        if x0.len() != plane {
            return Err(ModelError::Shape(format!("target of {} values for a {r}x{r} model", x0.len() / 3)));
        }
        let t = g.random_range(0..schedule.timesteps());
        let eps: Vec<f32> = (0..plane).map(|_| StandardNormal.sample(&mut g)).collect();
        latent.extend(schedule.q_sample(&x0, &eps, t));
        latent.extend(low);
        noise.extend(eps);
        ts.push(t);
    }
    let b = examples.len();
    let dtype = model.dtype();
    let latent = Tensor::from_vec(latent, (b, model.stage().latent_channels(), r, r), &dev)?.to_dtype(dtype)?;
    let noise = Tensor::from_vec(noise, (b, 3, r, r), &dev)?.to_dtype(dtype)?;
    let cond = if model.is_conditioned() {
        let fitted = examples
            .iter()
            .map(|e| fit_conditioning(&e.cond, cfg.conditioning_resolution))
            .collect::<Result<Vec<_>>>()?;
        let conds: Vec<&ConditioningInput> = fitted.iter().collect();
        Some(conditioning_tensor(&conds, cfg.conditioning_resolution, dtype)?)
    } else {
        None
    };
    let rows: Vec<&[u32]> = examples.iter().map(|e| e.cond.text_tokens.as_slice()).collect();
    Ok(Batch {
        latent,
        t: ts,
        cond,
        tokens: tokens_tensor(&rows, cfg.max_len)?,
        noise,
    })
}

/// Mean squared error between predicted and true noise.
pub fn batch_loss(model: &Denoiser, batch: &Batch) -> Result<Tensor> {
    let pred = model.forward(&batch.latent, &batch.t, batch.cond.as_ref(), &batch.tokens)?;
    Ok((pred - &batch.noise)?.sqr()?.mean_all()?)
}

/// The examples of step `step`: image indices depend only on the corpus
/// seed, masks and dropout on the training seed.
pub fn step_examples(
    cfg: &TrainConfig,
    step: usize,
    tokenizer: &Tokenizer,
    detector: Option<&dyn Detector>,
    exec: Exec,
) -> Result<Vec<TrainingExample>> {
    let corpus = RngStream::new(cfg.corpus_seed, "corpus");
    let examples = RngStream::new(cfg.seed, "examples");
    exec.map(cfg.batch_size, |b| {
        let global = (step * cfg.batch_size + b) as u64;
        let sample = corpus_sample(global % cfg.corpus_size, &corpus)?;
        make_training_example(&sample, cfg, tokenizer, detector, &examples.child_index(global))
    })
    .into_iter()
    .collect()
}

/// Trains `model` in place. With `log` set, every logged record is also
/// written there as a JSON line.
pub fn train(
    model: &Denoiser,
    cfg: &TrainConfig,
    detector: Option<&dyn Detector>,
    exec: Exec,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.stage() != cfg.stage {
        return Err(ModelError::Config(format!(
            "config is for the {} stage, model is {}",
            cfg.stage.as_str(),
            model.stage().as_str()
        )));
    }
    let tokenizer = Tokenizer::new(model.config().max_len);
    let schedule = NoiseSchedule::cosine(model.config().timesteps)?;
    let noise_rng = RngStream::new(cfg.seed, "noise");
    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: cfg.lr_at(0),
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let policy = if model.is_conditioned() { cfg.policy.policy.as_str() } else { "text" };
    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let examples = step_examples(cfg, step, &tokenizer, detector, exec)?;
        let batch = make_batch(model, &examples, &schedule, &noise_rng.child_index(step as u64))?;
        let loss = batch_loss(model, &batch)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(ModelError::Divergence(format!("loss {value} at step {step} (lr {})", cfg.lr_at(step))));
        }
        let lr = cfg.lr_at(step);
        opt.set_learning_rate(lr);
        opt.backward_step(&loss)?;
        losses.push(value);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let rec = LogRecord {
                step,
                loss: value,
                lr,
                policy: policy.to_string(),
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            log::debug!("step {step} loss {value:.4}");
            records.push(rec);
        }
    }
    Ok(TrainOutcome {
        log: records,
        losses,
        checkpoint_name: cfg.checkpoint_name(model.is_conditioned()),
        config_hash: cfg.hash(),
    })
}

/// Checkpoint of a trained model with the training config in its metadata.
pub fn trained_checkpoint(model: &Denoiser, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<Checkpoint> {
    let mut c = model.to_checkpoint()?;
    c.meta = serde_json::json!({
        "train_config": cfg,
        "config_hash": outcome.config_hash,
        "final_loss": outcome.losses.last(),
    });
    Ok(c)
}

/// Text-only model for `cfg.stage` trained on whole images.
pub fn pretrain(
    dcfg: &crate::denoiser::DenoiserConfig,
    cfg: &TrainConfig,
    exec: Exec,
    log: Option<&mut dyn Write>,
) -> Result<(Denoiser, TrainOutcome)> {
    let model = Denoiser::new(dcfg, cfg.stage, false, DType::F32, &RngStream::new(cfg.seed, "init"))?;
    let out = train(&model, cfg, None, exec, log)?;
    Ok((model, out))
}

pub struct PairOutcome {
    pub object_union: (Denoiser, TrainOutcome),
    pub random: (Denoiser, TrainOutcome),
}

/// Finetunes two inpainting models from the same pretrained weights with
/// identical configs apart from the mask policy.
pub fn train_pair(pretrained: &Denoiser, cfg: &TrainConfig, exec: Exec) -> Result<PairOutcome> {
    let run = |policy| -> Result<(Denoiser, TrainOutcome)> {
        let c = cfg.with_policy(policy);
        let m = Denoiser::init_finetune_from(pretrained)?;
        let out = train(&m, &c, None, exec, None)?;
        Ok((m, out))
    };
    Ok(PairOutcome {
        object_union: run(MaskPolicy::ObjectUnion)?,
        random: run(MaskPolicy::Random)?,
    })
}

/// Mask and example for a caller that already has an image; used by audits.
pub fn policy_mask(sample: &TrainingSample, cfg: &TrainConfig, rng: &RngStream) -> Result<MaskBuffer> {
    let tok = Tokenizer::default();
    Ok(make_training_example(sample, cfg, &tok, None, rng)?.cond.mask)
}
