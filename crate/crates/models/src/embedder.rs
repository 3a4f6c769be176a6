//! Contrastive text-image embedder trained on the synthetic corpus.

use std::io::Write;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use inpaintkit_core::embed::{Embedder, Embedding};
use inpaintkit_core::metrics::crop_to_mask_bbox;
use inpaintkit_core::scenegen::{corpus_sample, full_prompt, make_free_form_mask, make_prompts, CANVAS};
use inpaintkit_core::vocab::{AttributeCategory, Prompt, Tokenizer, PAD};
use inpaintkit_core::{Exec, ImageBuffer, RngStream};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::denoiser::{image_to_chw, tokens_tensor};
use crate::error::{ModelError, Result};
use crate::nn::{Conv, Init, Linear, ParamStore};

pub const CHECKPOINT_KIND: &str = "embedder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub image_size: usize,
    pub dim: usize,
    pub widths: Vec<usize>,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        let tok = Tokenizer::default();
        Self {
            image_size: 32,
            dim: 64,
            widths: vec![16, 32, 64, 64],
            text_dim: 64,
            vocab_size: tok.vocab_size(),
            max_len: tok.max_len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub corpus_seed: u64,
    pub corpus_size: u64,
    /// Share of pairs that are (object crop, mask prompt) instead of
    /// (whole scene, caption).
    pub crop_fraction: f64,
    pub log_every: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 1500,
            learning_rate: 2e-3,
            warmup_steps: 100,
            seed: 0,
            corpus_seed: 1,
            corpus_size: 1 << 20,
            crop_fraction: 0.5,
            log_every: 50,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(ModelError::Config(format!(
                "contrastive training needs a batch of at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.crop_fraction) || self.corpus_size == 0 || self.log_every == 0 {
            return Err(ModelError::Config("invalid crop fraction, corpus size or log interval".into()));
        }
        Ok(())
    }
}

/// Image CNN and single-layer attention text encoder projecting into a
/// shared unit sphere.
#[derive(Debug)]
pub struct TrainedEmbedder {
    cfg: EmbedderConfig,
    params: ParamStore,
    convs: Vec<Conv>,
    img_proj: Linear,
    tok_emb: Tensor,
    pos_emb: Tensor,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff: Linear,
    txt_proj: Linear,
    logit_scale: Tensor,
    tokenizer: Tokenizer,
    trained: bool,
    fingerprint: String,
}

impl TrainedEmbedder {
    pub fn new(cfg: &EmbedderConfig, rng: &RngStream) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.dim == 0 || cfg.max_len == 0 {
            return Err(ModelError::Config("degenerate embedder config".into()));
        }
        let mut ps = ParamStore::new(DType::F32, rng.child("embedder"));
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv::new(&mut ps, &format!("img.conv{i}"), cin, w, 3, stride, 1.4)?);
            cin = w;
        }
        let td = cfg.text_dim;
        Ok(Self {
            img_proj: Linear::new(&mut ps, "img.proj", 2 * cin, cfg.dim, 1.0)?,
            tok_emb: ps.add("txt.tok_emb", &[cfg.vocab_size, td], Init::Fan { fan_in: 1, gain: 0.5 })?,
            pos_emb: ps.add("txt.pos_emb", &[cfg.max_len, td], Init::Fan { fan_in: 1, gain: 0.1 })?,
            q: Linear::new(&mut ps, "txt.q", td, td, 1.0)?,
            k: Linear::new(&mut ps, "txt.k", td, td, 1.0)?,
            v: Linear::new(&mut ps, "txt.v", td, td, 1.0)?,
            o: Linear::new(&mut ps, "txt.o", td, td, 1.0)?,
            ff: Linear::new(&mut ps, "txt.ff", td, td, 1.0)?,
            txt_proj: Linear::new(&mut ps, "txt.proj", td, cfg.dim, 1.0)?,
            logit_scale: ps.add("logit_scale", &[1], Init::Values(vec![(1.0f32 / 0.07).ln()]))?,
            convs,
            tokenizer: Tokenizer::new(cfg.max_len),
            cfg: cfg.clone(),
            params: ps,
            trained: false,
            fingerprint: String::new(),
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Freezes the current weights and records their hash.
    pub fn mark_trained(&mut self) -> Result<()> {
        self.trained = true;
        self.fingerprint = format!("embedder-{}", &self.to_checkpoint()?.hash()?[..16]);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = self.params.to_checkpoint(CHECKPOINT_KIND, serde_json::to_value(&self.cfg)?)?;
        c.meta = serde_json::json!({ "trained": self.trained });
        Ok(c)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let cfg: EmbedderConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| ModelError::Checkpoint(format!("bad embedder header: {e}")))?;
        let mut m = Self::new(&cfg, &RngStream::new(0, "load"))?;
        m.params.load(ckpt)?;
        if ckpt.meta.get("trained").and_then(|v| v.as_bool()).unwrap_or(false) {
            m.mark_trained()?;
        }
        Ok(m)
    }

    /// Any image resized to the input size, channels first in `[-1, 1]`.
    pub fn preprocess(&self, image: &ImageBuffer) -> Result<Vec<f32>> {
        let s = self.cfg.image_size;
        let (h, w) = image.shape();
        let resized = if h == w && h % s == 0 {
            image.downsample_area(h / s)?
        } else {
            image.resize_bilinear(s, s)?
        };
        Ok(image_to_chw(&resized))
    }

    fn image_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h)?.silu()?;
        }
        let mean = h.mean((2, 3))?;
        let max = h.flatten_from(2)?.max(D::Minus1)?;
        Ok(self.img_proj.forward(&Tensor::cat(&[mean, max], 1)?)?)
    }

    fn text_features(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, l) = tokens.dims2()?;
        let td = self.cfg.text_dim;
        let x = self
            .tok_emb
            .index_select(&tokens.flatten_all()?, 0)?
            .reshape((b, l, td))?
            .broadcast_add(&self.pos_emb)?;
        let keep = tokens.ne(PAD)?.to_dtype(DType::F32)?;
        let bias = ((&keep - 1.0)? * 1e4)?.unsqueeze(1)?;
        let q = self.q.forward(&x)?;
        let k = self.k.forward(&x)?;
        let v = self.v.forward(&x)?;
        let att = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (td as f64).sqrt())?.broadcast_add(&bias)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let x = (&x + self.o.forward(&att.matmul(&v)?)?)?;
        let x = (&x + self.ff.forward(&x)?.silu()?)?;
        let denom = keep.sum_keepdim(1)?.clamp(1.0, f64::MAX)?;
        let pooled = x.broadcast_mul(&keep.unsqueeze(2)?)?.sum(1)?.broadcast_div(&denom)?;
        Ok(self.txt_proj.forward(&pooled)?)
    }

    fn normalize(x: &Tensor) -> Result<Tensor> {
        let norm = x.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
        Ok(x.broadcast_div(&norm)?)
    }

    fn image_tensor(&self, images: &[&ImageBuffer]) -> Result<Tensor> {
        let s = self.cfg.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            data.extend(self.preprocess(img)?);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, s, s), &Device::Cpu)?)
    }

    fn text_tensor(&self, texts: &[&str]) -> Result<Tensor> {
        let ids: Vec<Vec<u32>> = texts.iter().map(|t| self.tokenizer.encode(t)).collect();
        let rows: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        tokens_tensor(&rows, self.cfg.max_len)
    }

    fn to_embeddings(t: &Tensor) -> Result<Vec<Embedding>> {
        let rows: Vec<Vec<f32>> = t.to_vec2()?;
        rows.into_iter().map(|r| Ok(Embedding::new(r)?)).collect()
    }

    fn check_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(ModelError::State("embedder has not been trained".into()))
        }
    }

    pub fn embed_images(&self, images: &[&ImageBuffer]) -> Result<Vec<Embedding>> {
        self.check_trained()?;
        Self::to_embeddings(&self.image_features(&self.image_tensor(images)?)?)
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        self.check_trained()?;
        Self::to_embeddings(&self.text_features(&self.text_tensor(texts)?)?)
    }

    /// Symmetric cross-entropy over in-batch negatives.
    pub fn contrastive_loss(&self, images: &[&ImageBuffer], texts: &[&str]) -> Result<Tensor> {
        let b = images.len();
        if b != texts.len() || b < 2 {
            return Err(ModelError::Config(format!("{b} images and {} texts", texts.len())));
        }
        let zi = Self::normalize(&self.image_features(&self.image_tensor(images)?)?)?;
        let zt = Self::normalize(&self.text_features(&self.text_tensor(texts)?)?)?;
        let scale = self.logit_scale.clamp(0.0, 100f64.ln())?.exp()?;
        let logits = zi.matmul(&zt.t()?)?.broadcast_mul(&scale)?;
        let labels = Tensor::arange(0u32, b as u32, &Device::Cpu)?;
        let a = candle_nn::loss::cross_entropy(&logits, &labels)?;
        let c = candle_nn::loss::cross_entropy(&logits.t()?.contiguous()?, &labels)?;
        Ok(((a + c)? / 2.0)?)
    }
}

impl Embedder for TrainedEmbedder {
    fn embed_image(&self, image: &ImageBuffer) -> inpaintkit_core::Result<Embedding> {
        self.embed_images(&[image])
            .map(|mut v| v.remove(0))
            .map_err(to_core)
    }

    fn embed_text(&self, prompt: &Prompt) -> inpaintkit_core::Result<Embedding> {
        self.embed_texts(&[&prompt.text]).map(|mut v| v.remove(0)).map_err(to_core)
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

fn to_core(e: ModelError) -> inpaintkit_core::Error {
    match e {
        ModelError::Core(c) => c,
        ModelError::State(s) => inpaintkit_core::Error::State(s),
        other => inpaintkit_core::Error::Shape(other.to_string()),
    }
}

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub image: ImageBuffer,
    pub text: String,
}

/// The `index`-th pair: a whole scene with its caption, or a crop around one
/// object (through a free-form mask, as in the benchmark) with a one- or
/// three-attribute phrase.
pub fn contrastive_pair(index: u64, cfg: &ContrastiveConfig) -> Result<ContrastivePair> {
    let corpus = RngStream::new(cfg.corpus_seed, "embedder-corpus");
    let sample = corpus_sample(index % cfg.corpus_size, &corpus)?;
    let scene = sample.scene.as_ref().expect("corpus samples carry scenes");
    let stream = RngStream::new(cfg.seed, "embedder-pairs").child_index(index);
    let mut r = stream.rng();
    if scene.objects.is_empty() || r.random::<f64>() >= cfg.crop_fraction {
        return Ok(ContrastivePair {
            text: full_prompt(scene)?.text,
            image: sample.image,
        });
    }
    let target = &scene.objects[r.random_range(0..scene.objects.len())];
    let probes: Vec<AttributeCategory> = AttributeCategory::ALL
        .into_iter()
        .filter(|c| *c != AttributeCategory::Count || target.count >= 2)
        .collect();
    let probe = probes[r.random_range(0..probes.len())];
    let prompts = make_prompts(target, scene, probe)?;
    let text = if r.random::<bool>() { prompts.mask_simple.text } else { prompts.mask_rich.text };
    let mask = make_free_form_mask(&target.bbox, (CANVAS, CANVAS), &stream.child("mask"))?;
    Ok(ContrastivePair {
        image: crop_to_mask_bbox(&sample.image, &mask)?,
        text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Trains a fresh embedder and freezes it.
pub fn train_contrastive(
    ecfg: &EmbedderConfig,
    cfg: &ContrastiveConfig,
    exec: Exec,
    mut log: Option<&mut dyn Write>,
) -> Result<(TrainedEmbedder, Vec<ContrastiveLog>)> {
    cfg.validate()?;
    let mut model = TrainedEmbedder::new(ecfg, &RngStream::new(cfg.seed, "init"))?;
    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut records = Vec::new();
    for step in 0..cfg.steps {
        let pairs: Vec<ContrastivePair> = exec
            .map(cfg.batch_size, |i| contrastive_pair((step * cfg.batch_size + i) as u64, cfg))
            .into_iter()
            .collect::<Result<_>>()?;
        let images: Vec<&ImageBuffer> = pairs.iter().map(|p| &p.image).collect();
        let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
        let loss = model.contrastive_loss(&images, &texts)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(ModelError::Divergence(format!("contrastive loss {value} at step {step}")));
        }
        let lr = cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
        opt.set_learning_rate(lr);
        opt.backward_step(&loss)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let rec = ContrastiveLog { step, loss: value, lr };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            records.push(rec);
        }
    }
    model.mark_trained()?;
    Ok((model, records))
}

/// Text-to-image top-1 retrieval accuracy over a set of pairs.
pub fn retrieval_top1(model: &TrainedEmbedder, pairs: &[ContrastivePair]) -> Result<f64> {
    let images: Vec<&ImageBuffer> = pairs.iter().map(|p| &p.image).collect();
    let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
    let zi = model.embed_images(&images)?;
    let zt = model.embed_texts(&texts)?;
    let hits = zt
        .iter()
        .enumerate()
        .filter(|(i, t)| {
            let mine = t.cosine(&zi[*i]);
            zi.iter().enumerate().all(|(j, e)| j == *i || pairs[j].text == pairs[*i].text || t.cosine(e) < mine)
        })
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_embedder_is_a_state_error() {
        let m = TrainedEmbedder::new(&EmbedderConfig::default(), &RngStream::new(1, "e")).unwrap();
        let img = ImageBuffer::filled(64, 64, [0.5; 3]).unwrap();
        assert!(matches!(m.embed_image(&img), Err(inpaintkit_core::Error::State(_))));
    }

    #[test]
    fn batch_below_two_is_rejected() {
        let cfg = ContrastiveConfig {
            batch_size: 1,
            ..ContrastiveConfig::default()
        };
        assert!(matches!(
            train_contrastive(&EmbedderConfig::default(), &cfg, Exec::Sequential, None),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let mut m = TrainedEmbedder::new(&EmbedderConfig::default(), &RngStream::new(1, "e")).unwrap();
        m.mark_trained().unwrap();
        let cfg = ContrastiveConfig::default();
        let p = contrastive_pair(3, &cfg).unwrap();
        let a = m.embed_images(&[&p.image, &p.image]).unwrap();
        assert_eq!(a[0], a[1]);
        let n: f64 = a[0].as_slice().iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-5);
        let t = m.embed_texts(&[&p.text, &p.text]).unwrap();
        assert_eq!(t[0], t[1]);
    }

    #[test]
    fn checkpoint_round_trip_keeps_state() {
        let mut m = TrainedEmbedder::new(&EmbedderConfig::default(), &RngStream::new(1, "e")).unwrap();
        let fresh = TrainedEmbedder::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert!(!fresh.is_trained());
        m.mark_trained().unwrap();
        let back = TrainedEmbedder::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert!(back.is_trained());
        assert_eq!(back.fingerprint(), m.fingerprint());
    }
}
