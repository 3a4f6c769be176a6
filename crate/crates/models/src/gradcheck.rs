//! Finite-difference gradient check for the denoiser.

use candle_core::{DType, Tensor};
use inpaintkit_core::RngStream;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::denoiser::{Denoiser, COND_CHANNELS};
use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps parameters with a
/// vanishing gradient from dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn gaussian(rng: &RngStream, n: usize) -> Vec<f64> {
    let mut r = rng.rng();
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Compares backprop gradients of `sum(forward * probe)` with central
/// differences on `n_params` parameters, picking a tensor uniformly and then
/// an element uniformly. The model must be `F64`.
pub fn gradient_check(model: &Denoiser, n_params: usize, step: f64, rng: &RngStream) -> Result<GradCheckReport> {
    if model.dtype() != DType::F64 {
        return Err(ModelError::Config("gradient check needs an f64 model".into()));
    }
    let dev = model.params().device().clone();
    let r = model.resolution();
    let latent_c = model.stage().latent_channels();
    let cres = model.config().conditioning_resolution;
    let cfg = model.config();
    let b = 2;
    let latent = Tensor::from_vec(gaussian(&rng.child("latent"), b * latent_c * r * r), (b, latent_c, r, r), &dev)?;
    let cond = model
        .is_conditioned()
        .then(|| {
            Tensor::from_vec(
                gaussian(&rng.child("cond"), b * COND_CHANNELS * cres * cres),
                (b, COND_CHANNELS, cres, cres),
                &dev,
            )
        })
        .transpose()?;
    let mut tr = rng.child("tokens").rng();
    let tokens: Vec<u32> = (0..b * cfg.max_len)
        .map(|i| {
            if i % cfg.max_len < cfg.max_len / 2 + 1 {
                tr.random_range(3..cfg.vocab_size as u32)
            } else {
                0
            }
        })
        .collect();
    let tokens = Tensor::from_vec(tokens, (b, cfg.max_len), &dev)?;
    let t: Vec<usize> = (0..b).map(|_| tr.random_range(0..cfg.timesteps)).collect();
    let probe = Tensor::from_vec(gaussian(&rng.child("probe"), b * 3 * r * r), (b, 3, r, r), &dev)?;

    let loss = |m: &Denoiser| -> Result<Tensor> {
        Ok((m.forward(&latent, &t, cond.as_ref(), &tokens)? * &probe)?.sum_all()?)
    };
    let grads = loss(model)?.backward()?;

    let named: Vec<(String, candle_core::Var)> =
        model.params().named_vars().map(|(n, v)| (n.to_string(), v.clone())).collect();
    let mut pick = rng.child("pick").rng();
    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let (name, var) = &named[pick.random_range(0..named.len())];
        let index = pick.random_range(0..var.elem_count());
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?[index],
            None => 0.0,
        };
        let original: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let eval = |delta: f64| -> Result<f64> {
            let mut v = original.clone();
            v[index] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), &dev)?)?;
            Ok(loss(model)?.to_scalar::<f64>()?)
        };
        let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
        var.set(&Tensor::from_vec(original, var.shape(), &dev)?)?;
        entries.push(GradCheckEntry {
            name: name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, 1e-6),
        });
    }
    Ok(GradCheckReport { entries })
}
