//! Parameter store with seeded initialization and the few layers the toy
//! networks need.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use inpaintkit_core::RngStream;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{ModelError, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    /// He-style normal with `std = gain / sqrt(fan_in)`.
    Fan { fan_in: usize, gain: f64 },
    Values(Vec<f32>),
}

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: RngStream,
}

impl ParamStore {
    pub fn new(dtype: DType, rng: RngStream) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates a parameter; values come from a stream keyed by its name so
    /// initialization does not depend on creation order.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(ModelError::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Fan { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
                let mut r = self.rng.child(name).rng();
                (0..n).map(|_| normal.sample(&mut r) as f32).collect()
            }
            Init::Values(v) => {
                if v.len() != n {
                    return Err(ModelError::Shape(format!("{name}: {} values for shape {shape:?}", v.len())));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self
            .get(name)?
            .as_tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?)
    }

    pub fn set_values(&self, name: &str, values: &[f32]) -> Result<()> {
        let var = self.get(name)?;
        if values.len() != var.elem_count() {
            return Err(ModelError::Shape(format!("{name}: {} values for {:?}", values.len(), var.shape())));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn to_checkpoint(&self, kind: &str, config: serde_json::Value) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(kind, config);
        for (name, var) in &self.vars {
            c.tensors.insert(name.clone(), (var.dims().to_vec(), self.values(name)?));
        }
        Ok(c)
    }

    /// Overwrites every parameter from `ckpt`; names and shapes must match
    /// exactly.
    pub fn load(&self, ckpt: &Checkpoint) -> Result<()> {
        let ours: Vec<&String> = self.vars.keys().collect();
        let theirs: Vec<&String> = ckpt.tensors.keys().collect();
        if ours != theirs {
            return Err(ModelError::Checkpoint("parameter names differ from the architecture".into()));
        }
        for (name, var) in &self.vars {
            let (shape, data) = &ckpt.tensors[name];
            if shape.as_slice() != var.dims() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: checkpoint shape {shape:?} vs architecture {:?}",
                    var.dims()
                )));
            }
            self.set_values(name, data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Result<Self> {
        let weight = ps.add(&format!("{name}.weight"), &[cout, cin, k, k], Init::Fan { fan_in: cin * k * k, gain })?;
        let bias = Some(ps.add(&format!("{name}.bias"), &[cout], Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize, gain: f64) -> Result<Self> {
        Ok(Self {
            weight: ps.add(&format!("{name}.weight"), &[dout, din], Init::Fan { fan_in: din, gain })?,
            bias: ps.add(&format!("{name}.bias"), &[dout], Init::Zeros)?,
        })
    }
}

impl Module for Linear {
    /// Applies to the last dimension of a 2-D or 3-D input.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            3 => x.broadcast_matmul(&w)?,
            _ => x.matmul(&w)?,
        };
        y.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(ModelError::Config(format!("{channels} channels do not split into {groups} groups")));
        }
        Ok(Self {
            gamma: ps.add(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: ps.add(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            groups,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)
    }
}

/// Standard sinusoidal embedding of integer timesteps, `(len(t), dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let a = step as f64 * freq;
            out.push(if i < half { a.sin() } else { a.cos() } as f32);
        }
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), device)?.to_dtype(dtype)?)
}
