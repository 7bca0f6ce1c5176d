#![allow(dead_code)]

pub mod oracles;

use candle_core::{DType, Device, Tensor, Var};
use qsvlm::data::{generate_corpus, GenConfig, SyntheticSample};
use qsvlm::encoders::EncoderConfig;
use qsvlm::nn::scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard-normal f64 tensor.
pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(normal_vec(n, rng), shape, &Device::Cpu).unwrap()
}

pub fn var(shape: &[usize], rng: &mut ChaCha8Rng) -> Var {
    Var::from_tensor(&randn(shape, rng)).unwrap()
}

/// Rows scaled to unit length.
pub fn unit_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub const FD_STEP: f64 = 1e-5;

/// Largest relative error `|g - g_fd| / max(|g|, |g_fd|)` (vector norms, one
/// per variable) between backprop and central differences of `f`. Variables
/// with more than `max_entries` elements are checked on an evenly spaced
/// subset.
pub fn grad_check<F>(vars: &[(&str, &Var)], max_entries: usize, f: F) -> Vec<(String, f64)>
where
    F: Fn() -> Tensor,
{
    let loss = f();
    let grads = loss.backward().unwrap();
    let mut out = Vec::new();
    for (name, v) in vars {
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap(),
            None => vec![0.0; v.elem_count()],
        };
        let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
        let n = base.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        let mut num = Vec::with_capacity(idx.len());
        let eval_at = |vals: &[f64]| -> f64 {
            v.set(&Tensor::from_vec(vals.to_vec(), v.dims(), &Device::Cpu).unwrap().to_dtype(v.dtype()).unwrap()).unwrap();
            scalar(&f()).unwrap()
        };
        for &i in &idx {
            let mut p = base.clone();
            p[i] += FD_STEP;
            let up = eval_at(&p);
            p[i] -= 2.0 * FD_STEP;
            let down = eval_at(&p);
            num.push((up - down) / (2.0 * FD_STEP));
        }
        eval_at(&base);
        let a: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        let diff = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        out.push((name.to_string(), rel));
    }
    out
}

pub fn max_error(errs: &[(String, f64)]) -> f64 {
    errs.iter().map(|e| e.1).fold(0.0, f64::max)
}

/// A model small enough for finite differences.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        attn_window: 1,
        ..EncoderConfig::default()
    }
}

pub fn tiny_corpus(n: usize, seed: u64) -> Vec<SyntheticSample> {
    let gen = GenConfig {
        image_size: 16,
        max_motifs: 2,
        motif_min: 4,
        motif_max: 6,
        ..GenConfig::default()
    };
    generate_corpus(n, &gen, seed).unwrap()
}

/// Small end-to-end configuration that trains in well under a second per step.
pub fn tiny_config(seed: u64) -> qsvlm::TrainConfig {
    let mut cfg = qsvlm::TrainConfig::default();
    cfg.seed = seed;
    cfg.steps = 4;
    cfg.batch_size = 4;
    cfg.model = tiny_encoder();
    cfg.masking.decoder_depth = 1;
    cfg.data = GenConfig {
        image_size: 16,
        max_motifs: 2,
        motif_min: 4,
        motif_max: 6,
        ..GenConfig::default()
    };
    cfg
}
