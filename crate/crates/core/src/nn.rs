//! Minimal layer library on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that checkpoints
//! and optimizers can address them uniformly. All initialization draws from an
//! explicit seeded generator; nothing here touches candle's global RNG, which keeps
//! training runs bit-reproducible on a single device.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::Once;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

mod fused;
mod im2col;

const SECOND_ORDER_ENV: &str = "CANDLE_GRAD_DO_NOT_DETACH";

/// Whether normalization layers use batch statistics (and update their running
/// estimates) or the frozen running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Frozen,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.buffers.iter()
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Looks up a parameter or buffer by its full name.
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Overwrites a named tensor, checking that the shape is unchanged.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: stored shape {:?}, expected {:?}",
                value.dims(),
                var.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().chain(self.buffers.keys()).cloned().collect()
    }

    /// Clamps every trainable entry to `[-limit, limit]` (WGAN weight clipping).
    pub fn clip(&self, limit: f64) -> Result<()> {
        for var in self.params.values() {
            var.set(&var.as_tensor().clamp(-limit, limit)?)?;
        }
        Ok(())
    }

    /// Deep copy with independent storage.
    pub fn snapshot(&self) -> Result<ParamStore> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(ParamStore {
            params: copy(&self.params)?,
            buffers: copy(&self.buffers)?,
        })
    }
}

/// Scoped parameter builder. Every created tensor is registered in the store under
/// `prefix.name`.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Scope {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        Scope {
            prefix: self.full(name.as_ref()),
            store: &mut *self.store,
            rng: &mut *self.rng,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Glorot-uniform initialized parameter.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Var> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.register(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F32, &Device::Cpu)? * value)?;
        self.register(name, t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F32, &Device::Cpu)? * value)?;
        let var = Var::from_tensor(&t)?;
        self.store.buffers.insert(self.full(name), var.clone());
        Ok(var)
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        let key = self.full(name);
        if self.store.params.insert(key.clone(), var.clone()).is_some() {
            return Err(Error::Contract(format!("parameter {key} registered twice")));
        }
        Ok(var)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(scope: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = scope.xavier("weight", &[out_dim, in_dim], in_dim, out_dim)?;
        let bias = scope.constant("bias", &[out_dim], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().t()?;
        Ok(xs.matmul(&w)?.broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        let weight = scope.xavier("weight", &[out_ch, in_ch, kernel, kernel], fan_in, fan_out)?;
        let bias = scope.constant("bias", &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(im2col::conv2d(xs, self.weight.as_tensor(), Some(self.bias.as_tensor()), self.stride, self.padding)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    const MOMENTUM: f64 = 0.1;
    const EPS: f64 = 1e-5;

    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.constant("gamma", &[channels], 1.0)?,
            beta: scope.constant("beta", &[channels], 0.0)?,
            running_mean: scope.buffer("running_mean", &[channels], 0.0)?,
            running_var: scope.buffer("running_var", &[channels], 1.0)?,
        })
    }

    pub fn forward(&self, xs: &Tensor, mode: NormMode) -> Result<Tensor> {
        let (n, c, h, w) = xs.dims4()?;
        let (mean, var) = match mode {
            NormMode::Train => {
                let flat = xs.transpose(0, 1)?.reshape((c, n * h * w))?;
                let mean = flat.mean(1)?;
                let centered = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
                let var = centered.sqr()?.mean(1)?;
                let count = (n * h * w) as f64;
                let unbiased = if count > 1.0 {
                    (var.detach() * (count / (count - 1.0)))?
                } else {
                    var.detach()
                };
                let m = Self::MOMENTUM;
                self.running_mean.set(
                    &((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?,
                )?;
                self.running_var
                    .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
                (mean, var)
            }
            NormMode::Frozen => (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            ),
        };
        let shape = (1, c, 1, 1);
        let inv = (var + Self::EPS)?.sqrt()?.recip()?;
        let scale = (self.gamma.as_tensor() * inv)?.reshape(shape)?;
        let shift = self.beta.as_tensor().reshape(shape)?;
        Ok(xs
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_mul(&scale)?
            .broadcast_add(&shift)?)
    }
}

/// Parametric rectifier with one learned negative slope per channel.
#[derive(Clone, Debug)]
pub struct PRelu {
    slope: Var,
}

impl PRelu {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            slope: scope.constant("slope", &[channels], 0.25)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(fused::prelu(xs, self.slope.as_tensor())?)
    }
}

pub fn leaky_relu(xs: &Tensor) -> Result<Tensor> {
    Ok(fused::leaky_relu(xs)?)
}

pub fn tanh(xs: &Tensor) -> Result<Tensor> {
    Ok(fused::tanh(xs)?)
}

pub fn sigmoid(xs: &Tensor) -> Result<Tensor> {
    Ok((xs.neg()?.exp()? + 1.0)?.recip()?)
}

/// Per-pixel feature-vector normalization across channels.
pub fn pixel_norm(xs: &Tensor) -> Result<Tensor> {
    Ok(fused::pixel_norm(xs)?)
}

/// Row-wise standardization of a `(batch, dim)` tensor with population variance.
pub fn standardize_rows(xs: &Tensor) -> Result<Tensor> {
    let mean = xs.mean_keepdim(D::Minus1)?;
    let centered = xs.broadcast_sub(&mean)?;
    let sd = (centered.sqr()?.mean_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(centered.broadcast_div(&sd)?)
}

pub fn upsample2(xs: &Tensor) -> Result<Tensor> {
    Ok(fused::upsample2(xs)?)
}

/// Tiles a `(batch, c)` vector over a `size × size` grid.
pub fn tile_spatial(xs: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c) = xs.dims2()?;
    Ok(xs.reshape((n, c, 1, 1))?.broadcast_as((n, c, size, size))?.contiguous()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

thread_local! {
    static SECOND_ORDER_OK: Cell<Option<bool>> = const { Cell::new(None) };
}

static SET_ENV: Once = Once::new();

/// Requests that candle keep the backward graph so gradient penalties can be
/// differentiated. Must run before the first backward pass of a thread.
pub fn enable_second_order() {
    SET_ENV.call_once(|| std::env::set_var(SECOND_ORDER_ENV, "1"));
}

/// Checks (once per thread) that gradients of gradients are actually tracked.
pub fn second_order_available() -> Result<bool> {
    enable_second_order();
    if let Some(ok) = SECOND_ORDER_OK.with(|c| c.get()) {
        return Ok(ok);
    }
    let w = Var::new(&[2.0f32], &Device::Cpu)?;
    let x = Var::new(&[3.0f32], &Device::Cpu)?;
    let y = (w.as_tensor() * x.as_tensor())?.sqr()?.sum_all()?;
    let g = y.backward()?;
    let gx = g
        .get(x.as_tensor())
        .ok_or_else(|| Error::Contract("probe gradient missing".into()))?;
    // d/dw (dy/dx)^2 = d/dw (2 w^2 x)^2 = 16 w^3 x^2 = 1152
    let g2 = gx.sqr()?.sum_all()?.backward()?;
    let ok = match g2.get(w.as_tensor()) {
        Some(t) => (scalar(&t.sum_all()?)? - 1152.0).abs() < 1e-2,
        None => false,
    };
    SECOND_ORDER_OK.with(|c| c.set(Some(ok)));
    Ok(ok)
}

/// Gradient penalty `mean((||∇ critic(x̃)||₂ − 1)²)` on per-sample interpolates
/// `x̃ = α·real + (1−α)·fake`. `alpha` has one entry per sample.
pub fn gradient_penalty<F>(critic: F, real: &Tensor, fake: &Tensor, alpha: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !second_order_available()? {
        return Err(Error::Contract(format!(
            "gradient penalty needs second-order gradients; set {SECOND_ORDER_ENV}=1 before any backward pass"
        )));
    }
    if real.dims() != fake.dims() {
        return Err(Error::Shape(format!(
            "penalty inputs {:?} vs {:?}",
            real.dims(),
            fake.dims()
        )));
    }
    let n = real.dim(0)?;
    let mut shape = vec![n];
    shape.extend(std::iter::repeat(1).take(real.rank() - 1));
    let a = alpha.reshape(shape)?;
    let mixed = (real.detach().broadcast_mul(&a)? + fake.detach().broadcast_mul(&(1.0 - &a)?)?)?;
    let probe = Var::from_tensor(&mixed)?;
    let out = critic(probe.as_tensor())?.sum_all()?;
    let grads = out.backward()?;
    let g = grads
        .get(probe.as_tensor())
        .ok_or_else(|| Error::Contract("critic output does not depend on its input".into()))?
        .reshape((n, ()))?;
    let norm = (g.sqr()?.sum(1)? + 1e-12)?.sqrt()?;
    Ok((norm - 1.0)?.sqr()?.mean_all()?)
}

/// Adam without weight decay. State is plain tensors so it can be checkpointed.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let vars: Vec<(String, Var)> = store.params().map(|(k, v)| (k.clone(), v.clone())).collect();
        let first = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            vars,
            first,
            second,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = ((&self.first[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// Named moment tensors plus the step counter, for checkpointing.
    pub fn state(&self) -> (u64, Vec<(String, Tensor, Tensor)>) {
        let entries = self
            .vars
            .iter()
            .zip(self.first.iter().zip(&self.second))
            .map(|((k, _), (m, v))| (k.clone(), m.clone(), v.clone()))
            .collect();
        (self.step, entries)
    }

    pub fn load_state(&mut self, step: u64, entries: &BTreeMap<String, (Tensor, Tensor)>) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let (m, v) = entries
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing for {name}")))?;
            if m.dims() != var.dims() || v.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
            }
            self.first[i] = m.clone();
            self.second[i] = v.clone();
        }
        self.step = step;
        Ok(())
    }
}
