//! Minimal layer set on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that the
//! initialization order, the optimizer state and the checkpoint layout are all
//! deterministic. Initial values come from a seeded ChaCha stream rather than
//! the device RNG.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels;

/// Small constant inside the L2 norm so padded (all-zero) rows stay finite.
pub const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform over `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
}

#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// Overwrite a parameter's value in place; the shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(
                "parameter",
                format!("{name} {:?}", var.dims()),
                format!("{:?}", value.dims()),
            ));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Creates parameters under a name prefix, drawing initial values from one
/// seeded stream.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-a..a)).collect()
            }
        };
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.insert(full, shape, values)
    }
}

/// Seeded stream used for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.param(
            "weight",
            &[out_dim, in_dim],
            Init::Xavier {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        )?;
        let bias = pb.param("bias", &[out_dim], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::invalid("linear on a scalar"))?;
        let rows = x.elem_count() / in_dim.max(1);
        let y = kernels::bias_add(&x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?, &self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", &[dim], Init::Ones)?,
            beta: pb.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::layer_norm(x, &self.gamma, &self.beta, LN_EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(&mut pb.pp("qkv"), dim, 3 * dim)?,
            out: Linear::new(&mut pb.pp("out"), dim, dim)?,
            heads,
        })
    }

    /// `x`: `[B, N, D]`. `key_bias`: optional additive `[B, 1, 1, N]` mask.
    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, d))?;
        self.out.forward(&ctx)
    }
}

/// Pre-norm transformer block with a 4x GELU MLP.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut pb.pp("ln1"), dim)?,
            attn: SelfAttention::new(&mut pb.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&mut pb.pp("ln2"), dim)?,
            fc1: Linear::new(&mut pb.pp("fc1"), dim, 4 * dim)?,
            fc2: Linear::new(&mut pb.pp("fc2"), 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let h = (x + self.attn.forward(&self.ln1.forward(x)?, key_bias)?)?;
        let m = self
            .fc2
            .forward(&gelu(&self.fc1.forward(&self.ln2.forward(&h)?)?)?)?;
        Ok((h + m)?)
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::gelu(x)?)
}

/// Softmax over the last dimension. The max shift is detached; it cancels
/// analytically so the gradient is unchanged.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `log(sum(exp(x)))` over the last dimension, keeping it.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + m)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_sub(&logsumexp_last(x)?)?)
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

fn sincos_row(pos: f64, dim: usize, out: &mut Vec<f64>) {
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half.max(1) as f64);
        out.push((pos * freq).sin());
    }
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half.max(1) as f64);
        out.push((pos * freq).cos());
    }
    if dim % 2 == 1 {
        out.push(0.0);
    }
}

/// Fixed 1-D sinusoidal table `[n, dim]`.
pub fn sincos_1d(n: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(n * dim);
    for p in 0..n {
        sincos_row(p as f64, dim, &mut v);
    }
    Ok(Tensor::from_vec(v, (n, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Fixed 2-D sinusoidal table `[grid*grid, dim]`: half the channels encode
/// the row, half the column.
pub fn sincos_2d(grid: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            sincos_row(r as f64, half, &mut v);
            sincos_row(c as f64, dim - half, &mut v);
        }
    }
    Ok(Tensor::from_vec(v, (grid * grid, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Reads a rank-0 or single-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .first()
        .copied()
        .ok_or_else(|| Error::invalid("empty tensor where a scalar was expected"))?)
}

/// Copies any tensor into `Vec<Vec<f64>>` rows of its last dimension.
pub fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let last = *t.dims().last().ok_or_else(|| Error::invalid("rows of a scalar tensor"))?;
    let flat = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if last == 0 {
        return Ok(Vec::new());
    }
    Ok(flat.chunks(last).map(<[f64]>::to_vec).collect())
}
