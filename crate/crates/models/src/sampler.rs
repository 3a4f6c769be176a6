//! Ancestral sampling through the cascade with classifier-free guidance.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use inpaintkit_core::vocab::Tokenizer;
use inpaintkit_core::{composite, ImageBuffer, RngStream};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{chw_to_image, conditioning_tensor, tokens_tensor, ConditioningInput, Denoiser, Stage};
use crate::diffusion::NoiseSchedule;
use crate::error::{ModelError, Result};

pub const DEFAULT_LOW: f64 = 1.0;
pub const DEFAULT_HIGH: f64 = 30.0;
pub const DEFAULT_SR_WEIGHT: f64 = 5.0;

/// `(1 - w) * eps_u + w * eps_c`, the guided noise estimate
/// `eps_u + w * (eps_c - eps_u)` written so that `w = 0` and `w = 1` return
/// the inputs bit for bit.
pub fn guided_eps(eps_uncond: &[f32], eps_cond: &[f32], w: f64) -> Result<Vec<f32>> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(ModelError::Shape(format!(
            "unconditional and conditional predictions differ in size ({} vs {})",
            eps_uncond.len(),
            eps_cond.len()
        )));
    }
    if !w.is_finite() {
        return Err(ModelError::Request(format!("guidance weight {w} is not finite")));
    }
    let (a, b) = ((1.0 - w) as f32, w as f32);
    Ok(eps_uncond.iter().zip(eps_cond).map(|(u, c)| a * u + b * c).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GuidanceMode {
    Constant { weight: f64 },
    /// Strict per-step alternation `high, low, high, ...`.
    Oscillating { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub mode: GuidanceMode,
    /// Constant weights that replace the mode for a stage.
    #[serde(default)]
    pub stage_overrides: BTreeMap<Stage, f64>,
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        Self::new(GuidanceMode::Oscillating {
            low: DEFAULT_LOW,
            high: DEFAULT_HIGH,
        })
    }
}

impl GuidanceSchedule {
    /// `mode` for the base stage; the SR stage keeps its constant default.
    pub fn new(mode: GuidanceMode) -> Self {
        Self {
            mode,
            stage_overrides: BTreeMap::from([(Stage::Sr, DEFAULT_SR_WEIGHT)]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |w: f64| !w.is_finite() || w < 0.0;
        match self.mode {
            GuidanceMode::Constant { weight } if bad(weight) => {
                return Err(ModelError::Request(format!("invalid guidance weight {weight}")))
            }
            GuidanceMode::Oscillating { low, high } if bad(low) || bad(high) || low > high => {
                return Err(ModelError::Request(format!("invalid oscillation range {low},{high}")))
            }
            _ => {}
        }
        if let Some((s, w)) = self.stage_overrides.iter().find(|(_, w)| bad(**w)) {
            return Err(ModelError::Request(format!("invalid {} override {w}", s.as_str())));
        }
        Ok(())
    }
}

impl fmt::Display for GuidanceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            GuidanceMode::Constant { weight } => write!(f, "constant:{weight}"),
            GuidanceMode::Oscillating { low, high } => write!(f, "oscillate:{low},{high}"),
        }
    }
}

impl FromStr for GuidanceSchedule {
    type Err = ModelError;

    /// `constant:W` or `oscillate:LO,HI`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || ModelError::Request(format!("guidance must be constant:W or oscillate:LO,HI, got {s:?}"));
        let (mode, args) = s.split_once(':').ok_or_else(bad)?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let mode = match mode.trim() {
            "constant" => GuidanceMode::Constant { weight: num(args)? },
            "oscillate" | "oscillating" => {
                let (lo, hi) = args.split_once(',').ok_or_else(bad)?;
                GuidanceMode::Oscillating {
                    low: num(lo)?,
                    high: num(hi)?,
                }
            }
            _ => return Err(bad()),
        };
        let g = Self::new(mode);
        g.validate()?;
        Ok(g)
    }
}

/// Guidance weight at `step_index` of `stage`.
pub fn schedule_weight(g: &GuidanceSchedule, step_index: usize, stage: Stage) -> f64 {
    if let Some(&w) = g.stage_overrides.get(&stage) {
        return w;
    }
    match g.mode {
        GuidanceMode::Constant { weight } => weight,
        GuidanceMode::Oscillating { low, high } => {
            if step_index % 2 == 0 {
                high
            } else {
                low
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub cond: ConditioningInput,
    pub n_samples: usize,
    pub steps: usize,
    /// Steps for the SR stage; `None` uses `steps`.
    pub sr_steps: Option<usize>,
    pub seed: u64,
    pub guidance: GuidanceSchedule,
}

impl SampleRequest {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(ModelError::Request("n_samples must be at least 1".into()));
        }
        if self.steps < 2 || self.sr_steps.is_some_and(|s| s < 2) {
            return Err(ModelError::Request("steps must be at least 2".into()));
        }
        self.guidance.validate()
    }
}

fn gaussian(rng: &mut impl rand::Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn run_stage(
    model: &Denoiser,
    req: &SampleRequest,
    steps: usize,
    extra: Option<&[Vec<f32>]>,
    rng: &RngStream,
) -> Result<Vec<Vec<f32>>> {
    let cfg = model.config();
    let stage = model.stage();
    let n = req.n_samples;
    let r = model.resolution();
    let plane = 3 * r * r;
    let schedule = NoiseSchedule::cosine(cfg.timesteps)?;
    let ts = schedule.respaced(steps.min(cfg.timesteps))?;
    let null = Tokenizer::new(cfg.max_len).null_sequence();
    let token_rows: Vec<&[u32]> = (0..2 * n)
        .map(|i| if i < n { req.cond.text_tokens.as_slice() } else { null.as_slice() })
        .collect();
    let tokens = tokens_tensor(&token_rows, cfg.max_len)?;
    let cond_one = conditioning_tensor(&[&req.cond], cfg.conditioning_resolution, model.dtype())?;
    let cond = cond_one.repeat((2 * n, 1, 1, 1))?;
    let mut rngs: Vec<_> = (0..n).map(|i| rng.child(stage.as_str()).rng_at(i as u64)).collect();
    let mut xs: Vec<Vec<f32>> = rngs.iter_mut().map(|g| gaussian(g, plane)).collect();
    let latent_c = stage.latent_channels();
    for (k, &t) in ts.iter().enumerate() {
        let mut data = Vec::with_capacity(2 * n * latent_c * r * r);
        for _ in 0..2 {
            for (i, x) in xs.iter().enumerate() {
                data.extend_from_slice(x);
                if let Some(e) = extra {
                    data.extend_from_slice(&e[i]);
                }
            }
        }
        let latent = Tensor::from_vec(data, (2 * n, latent_c, r, r), &Device::Cpu)?.to_dtype(model.dtype())?;
        let eps = model.forward(&latent, &vec![t; 2 * n], Some(&cond), &tokens)?;
        let eps: Vec<f32> = eps.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let w = schedule_weight(&req.guidance, k, stage);
        let t_prev = ts.get(k + 1).copied();
        for i in 0..n {
            let e_c = &eps[i * plane..(i + 1) * plane];
            let e_u = &eps[(n + i) * plane..(n + i + 1) * plane];
            let guided = guided_eps(e_u, e_c, w)?;
            let (mean, std) = schedule.step(&xs[i], &guided, t, t_prev);
            xs[i] = if std > 0.0 {
                let z = gaussian(&mut rngs[i], plane);
                mean.iter().zip(&z).map(|(m, z)| m + std * z).collect()
            } else {
                mean
            };
        }
    }
    Ok(xs)
}

/// Nearest-neighbour upsampling of `(3, r, r)` planes by `factor`.
fn upsample_planes(x: &[f32], r: usize, factor: usize) -> Vec<f32> {
    let o = r * factor;
    let mut out = vec![0.0; 3 * o * o];
    for c in 0..3 {
        for y in 0..o {
            for xx in 0..o {
                out[c * o * o + y * o + xx] = x[c * r * r + (y / factor) * r + xx / factor];
            }
        }
    }
    out
}

/// Runs the cascade and composites every output onto the request image, so
/// pixels outside the mask are copied from the input unchanged.
pub fn sample(req: &SampleRequest, base: Option<&Denoiser>, sr: Option<&Denoiser>) -> Result<Vec<ImageBuffer>> {
    req.validate()?;
    let base = base.ok_or_else(|| ModelError::Request("no base model loaded".into()))?;
    let sr = sr.ok_or_else(|| ModelError::Request("no super-resolution model loaded".into()))?;
    for (m, stage) in [(base, Stage::Base), (sr, Stage::Sr)] {
        if m.stage() != stage || !m.is_conditioned() {
            return Err(ModelError::Request(format!("{} slot needs an inpainting {} model", stage.as_str(), stage.as_str())));
        }
        if req.cond.text_tokens.len() != m.config().max_len {
            return Err(ModelError::Request(format!(
                "{} text tokens, model expects {}",
                req.cond.text_tokens.len(),
                m.config().max_len
            )));
        }
    }
    let (br, sres) = (base.resolution(), sr.resolution());
    if sres % br != 0 || req.cond.mask.shape() != (sres, sres) {
        return Err(ModelError::Request(format!("input must be {sres}x{sres}")));
    }
    let rng = RngStream::new(req.seed, "sample");
    let low = run_stage(base, req, req.steps, None, &rng)?;
    let low_up: Vec<Vec<f32>> = low.iter().map(|x| upsample_planes(x, br, sres / br)).collect();
    let high = run_stage(sr, req, req.sr_steps.unwrap_or(req.steps), Some(&low_up), &rng)?;
    high.iter()
        .map(|x| {
            let img = chw_to_image(x, sres, sres)?;
            Ok(composite(&req.cond.masked_image, &img, &req.cond.mask)?)
        })
        .collect()
}
