//! Toy two-stage cascade of text-conditioned UNets predicting noise. After
//! inpainting finetuning, the first convolution also sees the masked image
//! and the mask, downsampled to the stage resolution.

use candle_core::{DType, Device, Module, Tensor, D};
use inpaintkit_core::vocab::{Tokenizer, PAD};
use inpaintkit_core::{ImageBuffer, MaskBuffer, RngStream};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{ModelError, Result};
use crate::nn::{timestep_embedding, Conv, GroupNorm, Init, Linear, ParamStore};

pub const CHECKPOINT_KIND: &str = "denoiser";
/// Masked image (3) plus mask (1).
pub const COND_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Sr,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Sr => "sr",
        }
    }

    /// Base: the noisy image. SR: the noisy image plus the upsampled
    /// low-resolution image.
    pub fn latent_channels(&self) -> usize {
        match self {
            Stage::Base => 3,
            Stage::Sr => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Downsampling {
    LearnedConv,
    Bicubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_resolution: usize,
    pub sr_resolution: usize,
    pub conditioning_resolution: usize,
    pub base_widths: Vec<usize>,
    pub sr_widths: Vec<usize>,
    pub groups: usize,
    pub text_embed_dim: usize,
    pub time_embed_dim: usize,
    pub attn_dim: usize,
    pub downsampling: Downsampling,
    pub vocab_size: usize,
    pub max_len: usize,
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        let tok = Tokenizer::default();
        Self {
            base_resolution: 16,
            sr_resolution: 64,
            conditioning_resolution: 64,
            base_widths: vec![32, 64],
            sr_widths: vec![8, 16, 32],
            groups: 8,
            text_embed_dim: 32,
            time_embed_dim: 64,
            attn_dim: 32,
            downsampling: Downsampling::LearnedConv,
            vocab_size: tok.vocab_size(),
            max_len: tok.max_len(),
            timesteps: crate::diffusion::DEFAULT_TIMESTEPS,
        }
    }
}

impl DenoiserConfig {
    /// Width-8 instantiation used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            base_resolution: 8,
            sr_resolution: 16,
            conditioning_resolution: 16,
            base_widths: vec![8, 8],
            sr_widths: vec![8, 8],
            groups: 4,
            text_embed_dim: 8,
            time_embed_dim: 8,
            attn_dim: 8,
            max_len: 8,
            ..Self::default()
        }
    }

    pub fn resolution(&self, stage: Stage) -> usize {
        match stage {
            Stage::Base => self.base_resolution,
            Stage::Sr => self.sr_resolution,
        }
    }

    pub fn widths(&self, stage: Stage) -> &[usize] {
        match stage {
            Stage::Base => &self.base_widths,
            Stage::Sr => &self.sr_widths,
        }
    }

    /// Conditioning stride for a stage.
    pub fn stride(&self, stage: Stage) -> Result<usize> {
        let r = self.resolution(stage);
        if r == 0 || self.conditioning_resolution < r || self.conditioning_resolution % r != 0 {
            return Err(ModelError::Config(format!(
                "conditioning resolution {} is not an integer multiple of stage resolution {r}",
                self.conditioning_resolution
            )));
        }
        Ok(self.conditioning_resolution / r)
    }

    pub fn validate(&self) -> Result<()> {
        for stage in [Stage::Base, Stage::Sr] {
            self.stride(stage)?;
            let widths = self.widths(stage);
            if widths.is_empty() {
                return Err(ModelError::Config(format!("{} stage has no widths", stage.as_str())));
            }
            let levels = widths.len() - 1;
            if self.resolution(stage) % (1 << levels) != 0 {
                return Err(ModelError::Config(format!(
                    "{} resolution does not halve {levels} times",
                    stage.as_str()
                )));
            }
            if widths.iter().any(|w| w % self.groups != 0) {
                return Err(ModelError::Config(format!("widths {widths:?} do not split into {} groups", self.groups)));
            }
        }
        if self.time_embed_dim < 2 || self.max_len == 0 || self.vocab_size <= PAD as usize {
            return Err(ModelError::Config("degenerate embedding sizes".into()));
        }
        Ok(())
    }
}

/// What the user supplies: the image with its edit region zeroed, the mask
/// and the tokenized prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningInput {
    pub masked_image: ImageBuffer,
    pub mask: MaskBuffer,
    pub text_tokens: Vec<u32>,
}

impl ConditioningInput {
    pub fn new(image: &ImageBuffer, mask: &MaskBuffer, text_tokens: Vec<u32>) -> Result<Self> {
        Ok(Self {
            masked_image: image.masked(mask)?,
            mask: mask.clone(),
            text_tokens,
        })
    }
}

/// Image data mapped from `[0, 1]` to `[-1, 1]`, channels first.
pub fn image_to_chw(image: &ImageBuffer) -> Vec<f32> {
    let (h, w) = image.shape();
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = image.get(y, x);
            for c in 0..3 {
                out[c * h * w + y * w + x] = 2.0 * p[c] - 1.0;
            }
        }
    }
    out
}

pub fn chw_to_image(data: &[f32], h: usize, w: usize) -> Result<ImageBuffer> {
    if data.len() != 3 * h * w {
        return Err(ModelError::Shape(format!("{} values for 3x{h}x{w}", data.len())));
    }
    let mut hwc = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            hwc[i * 3 + c] = (data[c * h * w + i] + 1.0) / 2.0;
        }
    }
    Ok(ImageBuffer::from_clamped(h, w, hwc)?)
}

/// `(B, 4, R, R)` conditioning tensor at the conditioning resolution.
pub fn conditioning_tensor(conds: &[&ConditioningInput], resolution: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(conds.len() * COND_CHANNELS * resolution * resolution);
    for c in conds {
        if c.masked_image.shape() != (resolution, resolution) || c.mask.shape() != (resolution, resolution) {
            return Err(ModelError::Shape(format!(
                "conditioning must be {resolution}x{resolution}, got {:?}",
                c.masked_image.shape()
            )));
        }
        data.extend(image_to_chw(&c.masked_image));
        data.extend(c.mask.data().iter().map(|&m| m as f32));
    }
    Ok(Tensor::from_vec(data, (conds.len(), COND_CHANNELS, resolution, resolution), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tokens_tensor(tokens: &[&[u32]], max_len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(tokens.len() * max_len);
    for t in tokens {
        if t.len() != max_len {
            return Err(ModelError::Shape(format!("token sequence of length {} (expected {max_len})", t.len())));
        }
        data.extend_from_slice(t);
    }
    Ok(Tensor::from_vec(data, (tokens.len(), max_len), &Device::Cpu)?)
}

fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Antialiased bicubic downsampling of `(C, H, W)` planes by an integer
/// factor, with edge clamping.
pub fn bicubic_downsample(data: &[f32], channels: usize, h: usize, w: usize, factor: usize) -> Vec<f32> {
    if factor == 1 {
        return data.to_vec();
    }
    let (oh, ow) = (h / factor, w / factor);
    let s = factor as f64;
    let taps = |o: usize, n: usize| -> Vec<(usize, f64)> {
        let center = (o as f64 + 0.5) * s - 0.5;
        let lo = (center - 2.0 * s).floor() as i64;
        let hi = (center + 2.0 * s).ceil() as i64;
        let mut t: Vec<(usize, f64)> = (lo..=hi)
            .map(|j| (j.clamp(0, n as i64 - 1) as usize, cubic((j as f64 - center) / s)))
            .filter(|(_, wt)| *wt != 0.0)
            .collect();
        let sum: f64 = t.iter().map(|(_, w)| w).sum();
        for x in &mut t {
            x.1 /= sum;
        }
        t
    };
    let ys: Vec<_> = (0..oh).map(|o| taps(o, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| taps(o, w)).collect();
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let mut acc = 0.0;
                for &(y, wy) in ty {
                    for &(x, wx) in tx {
                        acc += wy * wx * plane[y * w + x] as f64;
                    }
                }
                out[c * oh * ow + oy * ow + ox] = acc as f32;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), cin, groups)?,
            conv1: Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0)?,
            temb: Linear::new(ps, &format!("{name}.temb"), tdim, cout, 1.0)?,
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), cout, groups)?,
            conv2: Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 0.5)?,
            skip: (cin != cout)
                .then(|| Conv::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 1.0))
                .transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.gn1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.gn2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    dim: usize,
}

impl CrossAttention {
    fn new(ps: &mut ParamStore, name: &str, channels: usize, text_dim: usize, dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels, groups)?,
            q: Linear::new(ps, &format!("{name}.q"), channels, dim, 1.0)?,
            k: Linear::new(ps, &format!("{name}.k"), text_dim, dim, 1.0)?,
            v: Linear::new(ps, &format!("{name}.v"), text_dim, dim, 1.0)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, channels, 0.5)?,
            dim,
        })
    }

    /// `text`: `(B, L, dt)`; `bias`: `(B, 1, L)` additive key mask.
    fn forward(&self, x: &Tensor, text: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = self.q.forward(&tokens)?;
        let k = self.k.forward(text)?;
        let v = self.v.forward(text)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.dim as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&scores.broadcast_add(bias)?, D::Minus1)?;
        let y = self.out.forward(&att.matmul(&v)?)?;
        let y = y.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + y)?)
    }
}

/// One stage of the cascade.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    stage: Stage,
    conditioned: bool,
    params: ParamStore,
    cond_down: Option<Tensor>,
    conv_in: Conv,
    tok_emb: Tensor,
    pos_emb: Tensor,
    text_pool: Linear,
    time1: Linear,
    time2: Linear,
    down_blocks: Vec<ResBlock>,
    downsamplers: Vec<Conv>,
    mid: ResBlock,
    attn: CrossAttention,
    upsamplers: Vec<Conv>,
    up_blocks: Vec<ResBlock>,
    out_norm: GroupNorm,
    conv_out: Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeaderConfig {
    denoiser: DenoiserConfig,
    stage: Stage,
    conditioned: bool,
}

/// Averaging kernel mapping each conditioning channel to itself.
fn averaging_kernel(stride: usize) -> Vec<f32> {
    let k = stride * stride;
    let mut v = vec![0.0; COND_CHANNELS * COND_CHANNELS * k];
    for c in 0..COND_CHANNELS {
        for i in 0..k {
            v[(c * COND_CHANNELS + c) * k + i] = 1.0 / k as f32;
        }
    }
    v
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, stage: Stage, conditioned: bool, dtype: DType, rng: &RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(dtype, rng.child(stage.as_str()));
        let widths = cfg.widths(stage).to_vec();
        let g = cfg.groups;
        let td = cfg.time_embed_dim;
        let latent = stage.latent_channels();
        let stride = cfg.stride(stage)?;
        let cond_down = match (conditioned, cfg.downsampling) {
            (true, Downsampling::LearnedConv) => Some(ps.add(
                "cond_down.weight",
                &[COND_CHANNELS, COND_CHANNELS, stride, stride],
                Init::Values(averaging_kernel(stride)),
            )?),
            _ => None,
        };
        let in_ch = latent + if conditioned { COND_CHANNELS } else { 0 };
        let conv_in = Conv::new(&mut ps, "conv_in", in_ch, widths[0], 3, 1, 1.0)?;
        let tok_emb = ps.add(
            "text.tok_emb",
            &[cfg.vocab_size, cfg.text_embed_dim],
            Init::Fan { fan_in: 1, gain: 0.5 },
        )?;
        let pos_emb = ps.add(
            "text.pos_emb",
            &[cfg.max_len, cfg.text_embed_dim],
            Init::Fan { fan_in: 1, gain: 0.1 },
        )?;
        let text_pool = Linear::new(&mut ps, "text.pool", cfg.text_embed_dim, td, 1.0)?;
        let time1 = Linear::new(&mut ps, "time.l1", td, td, 1.0)?;
        let time2 = Linear::new(&mut ps, "time.l2", td, td, 1.0)?;
        let mut down_blocks = Vec::new();
        let mut downsamplers = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            down_blocks.push(ResBlock::new(&mut ps, &format!("down{i}"), w, w, td, g)?);
            if let Some(&next) = widths.get(i + 1) {
                downsamplers.push(Conv::new(&mut ps, &format!("downsample{i}"), w, next, 3, 2, 1.0)?);
            }
        }
        let last = *widths.last().expect("validated");
        let mid = ResBlock::new(&mut ps, "mid", last, last, td, g)?;
        let attn = CrossAttention::new(&mut ps, "attn", last, cfg.text_embed_dim, cfg.attn_dim, g)?;
        let mut upsamplers = Vec::new();
        let mut up_blocks = Vec::new();
        for i in (0..widths.len() - 1).rev() {
            upsamplers.push(Conv::new(&mut ps, &format!("upsample{i}"), widths[i + 1], widths[i], 3, 1, 1.0)?);
            up_blocks.push(ResBlock::new(&mut ps, &format!("up{i}"), 2 * widths[i], widths[i], td, g)?);
        }
        let out_norm = GroupNorm::new(&mut ps, "out.norm", widths[0], g)?;
        let conv_out = Conv::new(&mut ps, "out.conv", widths[0], 3, 3, 1, 0.5)?;
        Ok(Self {
            cfg: cfg.clone(),
            stage,
            conditioned,
            params: ps,
            cond_down,
            conv_in,
            tok_emb,
            pos_emb,
            text_pool,
            time1,
            time2,
            down_blocks,
            downsamplers,
            mid,
            attn,
            upsamplers,
            up_blocks,
            out_norm,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn is_conditioned(&self) -> bool {
        self.conditioned
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn resolution(&self) -> usize {
        self.cfg.resolution(self.stage)
    }

    /// Channels entering the first convolution.
    pub fn input_channels(&self) -> usize {
        self.stage.latent_channels() + if self.conditioned { COND_CHANNELS } else { 0 }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let cfg = HeaderConfig {
            denoiser: self.cfg.clone(),
            stage: self.stage,
            conditioned: self.conditioned,
        };
        self.params.to_checkpoint(CHECKPOINT_KIND, serde_json::to_value(cfg)?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let h: HeaderConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| ModelError::Checkpoint(format!("bad denoiser header: {e}")))?;
        let model = Self::new(&h.denoiser, h.stage, h.conditioned, dtype, &RngStream::new(0, "load"))?;
        model.params.load(ckpt)?;
        Ok(model)
    }

    /// Inpainting model initialized from a text-only model: every original
    /// weight copied, the new input channels of the first convolution zero.
    pub fn init_finetune_from(base: &Denoiser) -> Result<Self> {
        if base.conditioned {
            return Err(ModelError::Checkpoint("source model already takes conditioning".into()));
        }
        let model = Self::new(&base.cfg, base.stage, true, base.dtype(), &RngStream::new(0, "finetune"))?;
        let latent = base.stage.latent_channels();
        for name in base.params.names() {
            let values = base.params.values(name)?;
            if name == "conv_in.weight" {
                let dims = model.params.get(name)?.dims().to_vec();
                let (cout, cin, k) = (dims[0], dims[1], dims[2] * dims[3]);
                let mut w = vec![0.0f32; cout * cin * k];
                for o in 0..cout {
                    for i in 0..latent {
                        let src = (o * latent + i) * k;
                        let dst = (o * cin + i) * k;
                        w[dst..dst + k].copy_from_slice(&values[src..src + k]);
                    }
                }
                model.params.set_values(name, &w)?;
            } else {
                model.params.set_values(name, &values)?;
            }
        }
        Ok(model)
    }

    pub fn init_finetune_from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        Self::init_finetune_from(&Self::from_checkpoint(ckpt, dtype)?)
    }

    /// First-layer weights acting on the conditioning channels.
    pub fn conditioning_input_weights(&self) -> Result<Vec<f32>> {
        if !self.conditioned {
            return Ok(Vec::new());
        }
        let dims = self.params.get("conv_in.weight")?.dims().to_vec();
        let values = self.params.values("conv_in.weight")?;
        let (cin, k) = (dims[1], dims[2] * dims[3]);
        let latent = self.stage.latent_channels();
        Ok((0..dims[0])
            .flat_map(|o| (latent..cin).flat_map(move |i| (0..k).map(move |j| (o * cin + i) * k + j)))
            .map(|idx| values[idx])
            .collect())
    }

    /// Downsamples a `(B, 4, R, R)` conditioning tensor to the stage
    /// resolution.
    pub fn encode_conditioning(&self, cond: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = cond.dims4()?;
        let r = self.cfg.conditioning_resolution;
        if c != COND_CHANNELS || h != r || w != r {
            return Err(ModelError::Shape(format!("conditioning {:?}, expected (B, 4, {r}, {r})", cond.dims())));
        }
        let stride = self.cfg.stride(self.stage)?;
        match (&self.cond_down, self.cfg.downsampling) {
            (Some(k), _) => Ok(cond.conv2d(k, 0, stride, 1, 1)?),
            (None, Downsampling::Bicubic) | (None, Downsampling::LearnedConv) => {
                let data: Vec<f32> = cond.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                let plane = c * h * w;
                let out: Vec<f32> = (0..b)
                    .flat_map(|i| bicubic_downsample(&data[i * plane..(i + 1) * plane], c, h, w, stride))
                    .collect();
                Ok(Tensor::from_vec(out, (b, c, h / stride, w / stride), cond.device())?.to_dtype(cond.dtype())?)
            }
        }
    }

    fn text_features(&self, tokens: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, l) = tokens.dims2()?;
        if l != self.cfg.max_len {
            return Err(ModelError::Shape(format!("{l} tokens, expected {}", self.cfg.max_len)));
        }
        let emb = self
            .tok_emb
            .index_select(&tokens.flatten_all()?, 0)?
            .reshape((b, l, self.cfg.text_embed_dim))?
            .broadcast_add(&self.pos_emb)?;
        let keep = tokens.ne(PAD)?.to_dtype(self.dtype())?;
        let denom = keep.sum_keepdim(1)?.clamp(1.0, f64::MAX)?;
        let pooled = emb
            .broadcast_mul(&keep.unsqueeze(2)?)?
            .sum(1)?
            .broadcast_div(&denom)?;
        let bias = ((keep - 1.0)? * 1e4)?.unsqueeze(1)?;
        Ok((emb, pooled, bias))
    }

    /// Predicted noise for `latent` at timesteps `t`.
    pub fn forward(&self, latent: &Tensor, t: &[usize], cond: Option<&Tensor>, tokens: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = latent.dims4()?;
        let r = self.resolution();
        if c != self.stage.latent_channels() || h != r || w != r {
            return Err(ModelError::Shape(format!(
                "latent {:?}, expected (B, {}, {r}, {r})",
                latent.dims(),
                self.stage.latent_channels()
            )));
        }
        if t.len() != b || tokens.dim(0)? != b {
            return Err(ModelError::Shape(format!("batch {b} vs {} timesteps, {} token rows", t.len(), tokens.dim(0)?)));
        }
        if let Some(&bad) = t.iter().find(|&&s| s >= self.cfg.timesteps) {
            return Err(ModelError::Shape(format!("timestep {bad} outside [0, {})", self.cfg.timesteps)));
        }
        let x = match (self.conditioned, cond) {
            (true, Some(c)) => {
                if c.dim(0)? != b {
                    return Err(ModelError::Shape("conditioning batch differs from latent batch".into()));
                }
                Tensor::cat(&[latent, &self.encode_conditioning(c)?], 1)?
            }
            (true, None) => return Err(ModelError::Shape("inpainting model needs conditioning".into())),
            (false, Some(_)) => return Err(ModelError::Shape("text-only model takes no conditioning".into())),
            (false, None) => latent.clone(),
        };
        let (text, pooled, bias) = self.text_features(tokens)?;
        let sinus = timestep_embedding(t, self.cfg.time_embed_dim, self.dtype(), latent.device())?;
        let temb = (self.time2.forward(&self.time1.forward(&sinus)?.silu()?)? + self.text_pool.forward(&pooled)?)?;

        let mut hcur = self.conv_in.forward(&x)?;
        let mut skips = Vec::new();
        for (i, block) in self.down_blocks.iter().enumerate() {
            hcur = block.forward(&hcur, &temb)?;
            if let Some(ds) = self.downsamplers.get(i) {
                skips.push(hcur.clone());
                hcur = ds.forward(&hcur)?;
            }
        }
        hcur = self.mid.forward(&hcur, &temb)?;
        hcur = self.attn.forward(&hcur, &text, &bias)?;
        for (up, block) in self.upsamplers.iter().zip(&self.up_blocks) {
            let (_, _, hh, ww) = hcur.dims4()?;
            hcur = up.forward(&hcur.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            let skip = skips.pop().expect("one skip per level");
            hcur = block.forward(&Tensor::cat(&[&hcur, &skip], 1)?, &temb)?;
        }
        Ok(self.conv_out.forward(&self.out_norm.forward(&hcur)?.silu()?)?)
    }
}
