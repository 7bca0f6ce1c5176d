//! Image/report matching: fused global features go through a two-layer head
//! that scores whether the pair belongs together. Negatives are drawn with
//! probability increasing in their similarity to the anchor.

use candle_core::{DType, Device, Tensor};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Linear, ParamBuilder};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before the logs.
pub const PROB_EPS: f64 = 1e-7;

/// Elementwise sum of the two modality embeddings.
pub fn fuse(v: &Tensor, t: &Tensor) -> Result<Tensor> {
    if v.dims() != t.dims() {
        return Err(Error::shape("fuse", format!("{:?}", v.dims()), format!("{:?}", t.dims())));
    }
    Ok((v + t)?)
}

/// `Linear(D, D) -> GELU -> Linear(D, 1)`.
#[derive(Debug, Clone)]
pub struct MatchHead {
    fc1: Linear,
    fc2: Linear,
}

impl MatchHead {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut pb.pp("fc1"), dim, dim)?,
            fc2: Linear::new(&mut pb.pp("fc2"), dim, 1)?,
        })
    }

    pub fn from_parts(fc1: Linear, fc2: Linear) -> Self {
        Self { fc1, fc2 }
    }

    /// `fused` `[M, D]` to logits `[M]`.
    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        let h = nn::gelu(&self.fc1.forward(fused)?)?;
        Ok(self.fc2.forward(&h)?.squeeze(1)?)
    }
}

/// Candidate pairs for the matching head.
#[derive(Debug, Clone)]
pub struct MatchBatch {
    pub fused: Tensor,
    pub labels: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl MatchBatch {
    /// Rows `0..B` are the true pairs, `B..2B` pair image `i` with report
    /// `neg_text[i]`, `2B..3B` pair image `neg_image[i]` with report `i`.
    pub fn build(
        v: &Tensor,
        t: &Tensor,
        neg_text: &[usize],
        neg_image: &[usize],
        head: &MatchHead,
    ) -> Result<Self> {
        let b = v.dims2()?.0;
        if neg_text.len() != b || neg_image.len() != b {
            return Err(Error::shape("negative indices", b, neg_text.len().min(neg_image.len())));
        }
        let dev = Device::Cpu;
        let idx = |xs: &[usize]| -> Result<Tensor> {
            let xs: Vec<u32> = xs.iter().map(|&x| x as u32).collect();
            Ok(Tensor::from_vec(xs, b, &dev)?)
        };
        let neg_t = t.index_select(&idx(neg_text)?, 0)?;
        let neg_v = v.index_select(&idx(neg_image)?, 0)?;
        let fused = Tensor::cat(&[fuse(v, t)?, fuse(v, &neg_t)?, fuse(&neg_v, t)?], 0)?;
        let mut y = vec![0f64; 3 * b];
        y[..b].iter_mut().for_each(|x| *x = 1.0);
        let labels = Tensor::from_vec(y, 3 * b, &dev)?.to_dtype(v.dtype())?;
        let logits = head.forward(&fused)?;
        let probs = nn::sigmoid(&logits)?;
        Ok(Self {
            fused,
            labels,
            logits,
            probs,
        })
    }
}

fn draw_from(weights: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(format!("hard-negative weights: {e}")))?;
    Ok(dist.sample(rng))
}

fn softmax_excluding(values: impl Iterator<Item = f64> + Clone, skip: usize) -> Vec<f64> {
    let m = values
        .clone()
        .enumerate()
        .filter(|(j, _)| *j != skip)
        .map(|(_, x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    values
        .enumerate()
        .map(|(j, x)| if j == skip { 0.0 } else { (x - m).exp() })
        .collect()
}

/// For each image `i`, a report `j != i` drawn with probability
/// `softmax_j(sim[i][j])` over the off-diagonal entries of row `i`; for each
/// report `i`, an image drawn the same way from column `i`.
pub fn sample_hard_negatives(sim: &[Vec<f64>], rng_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let b = sim.len();
    if b < 2 {
        return Err(Error::invalid("hard-negative sampling needs at least 2 pairs"));
    }
    if sim.iter().any(|r| r.len() != b) {
        return Err(Error::shape("similarity matrix", format!("[{b}, {b}]"), "ragged rows"));
    }
    if sim.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite similarity"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut neg_text = Vec::with_capacity(b);
    for (i, row) in sim.iter().enumerate() {
        neg_text.push(draw_from(&softmax_excluding(row.iter().copied(), i), &mut rng)?);
    }
    let mut neg_image = Vec::with_capacity(b);
    for i in 0..b {
        let col = sim.iter().map(|r| r[i]);
        neg_image.push(draw_from(&softmax_excluding(col, i), &mut rng)?);
    }
    Ok((neg_text, neg_image))
}

/// Mean binary cross-entropy of `probs` against 0/1 `labels`.
pub fn instance_matching_loss(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if probs.dims() != labels.dims() || probs.rank() != 1 {
        return Err(Error::shape("matching labels", format!("{:?}", probs.dims()), format!("{:?}", labels.dims())));
    }
    if probs.dims()[0] == 0 {
        return Err(Error::invalid("instance loss over zero pairs"));
    }
    let clamped_count = nn::scalar(
        &(probs.le(PROB_EPS)?.to_dtype(DType::F64)? + probs.ge(1.0 - PROB_EPS)?.to_dtype(DType::F64)?)?.sum_all()?,
    )?;
    if clamped_count > 0.0 {
        log::debug!("clamped {clamped_count} matching probabilities to [{PROB_EPS}, 1 - {PROB_EPS}]");
    }
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = (labels * p.log()?)?;
    let neg = ((labels.affine(-1.0, 1.0))? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}
