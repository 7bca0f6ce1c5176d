//! Sentence-to-region alignment.
//!
//! Each sentence attends over the image patches (softmax of cosine similarity
//! divided by `tau_att`); the attention-weighted patch sum, normalized, is the
//! sentence's context vector `c_i`. The pair score is the smooth maximum
//! `Z = tau2 * log sum_i exp(cos(c_i, t_i) / tau2)` over valid sentences, and
//! the loss is InfoNCE over the batch matrix of `Z / tau2`.

use candle_core::{Tensor, D};

use super::{ensure_finite, info_nce, TemperatureParams};
use crate::error::{Error, Result};
use crate::nn;

const MASKED_OUT: f64 = -1e9;

/// Attention and context vectors of one image/report pair.
#[derive(Debug, Clone)]
pub struct LocalMatch {
    /// `[S, D]`, one unit vector per sentence.
    pub contexts: Tensor,
    /// `[S, P]`, rows sum to one.
    pub attn: Tensor,
    pub z: Tensor,
}

/// Context vector of one sentence over `patches` (`[P, D]`).
pub fn attention_context(patches: &Tensor, sentence: &Tensor, tau_att: f64) -> Result<(Tensor, Tensor)> {
    let (p, d) = patches.dims2()?;
    if p == 0 {
        return Err(Error::invalid("attention over zero patches"));
    }
    if sentence.dims() != [d] {
        return Err(Error::shape("sentence embedding", format!("[{d}]"), format!("{:?}", sentence.dims())));
    }
    let m = local_match(patches, &sentence.unsqueeze(0)?, &TemperatureParams { tau_att, ..Default::default() })?;
    Ok((m.contexts.squeeze(0)?, m.attn.squeeze(0)?))
}

/// Full local match for one pair: `patches` `[P, D]`, `sentences` `[S, D]`
/// (all rows valid).
pub fn local_match(patches: &Tensor, sentences: &Tensor, temps: &TemperatureParams) -> Result<LocalMatch> {
    let (p, d) = patches.dims2()?;
    let (s, d2) = sentences.dims2()?;
    if p == 0 || s == 0 || d != d2 {
        return Err(Error::shape("local match", "P >= 1, S >= 1 and equal widths", format!("patches {:?}, sentences {:?}", patches.dims(), sentences.dims())));
    }
    let pn = nn::l2_normalize(patches)?;
    let sn = nn::l2_normalize(sentences)?;
    let attn = nn::softmax_last(&(sn.matmul(&pn.t()?)? / temps.tau_att)?)?;
    let contexts = nn::l2_normalize(&attn.matmul(patches)?)?;
    let cos = (&contexts * &sn)?.sum(D::Minus1)?;
    let z = (nn::logsumexp_last(&(cos / temps.tau2)?)?.squeeze(0)? * temps.tau2)?;
    Ok(LocalMatch { contexts, attn, z })
}

/// `Z(image i, report k)` for every pair in the batch, `[B, B]`.
///
/// `patches` `[B, P, D]`, `sentences` `[B, S, D]`, `sentence_mask` `[B, S]`
/// with 1.0 on valid slots; padded slots are excluded from the smooth max.
/// Sentence rows are taken as already unit-norm.
pub fn pairwise_z(patches: &Tensor, sentences: &Tensor, sentence_mask: &Tensor, temps: &TemperatureParams) -> Result<Tensor> {
    let (b, p, d) = patches.dims3()?;
    let (bt, s, dt) = sentences.dims3()?;
    if bt != b || dt != d || sentence_mask.dims() != [b, s] {
        return Err(Error::shape(
            "local alignment batch",
            format!("patches [B, P, D], sentences [B, S, D], mask [B, S] with B={b}, D={d}"),
            format!("sentences {:?}, mask {:?}", sentences.dims(), sentence_mask.dims()),
        ));
    }
    if p == 0 {
        return Err(Error::invalid("attention over zero patches"));
    }
    let pn = nn::l2_normalize(patches)?;
    // [B*P, D] x [D, B*S] -> [B_img, P, B_txt*S] -> [B_img, B_txt*S, P]
    let sims = pn
        .reshape((b * p, d))?
        .matmul(&sentences.reshape((b * s, d))?.t()?)?
        .reshape((b, p, b * s))?
        .transpose(1, 2)?
        .contiguous()?;
    let attn = nn::softmax_last(&(sims / temps.tau_att)?)?;
    let ctx = nn::l2_normalize(&attn.matmul(patches)?)?.reshape((b, b, s, d))?;
    let cos = ctx.broadcast_mul(&sentences.unsqueeze(0)?)?.sum(D::Minus1)?; // [B, B, S]
    // 0 on valid slots, MASKED_OUT on padding
    let penalty = ((sentence_mask.unsqueeze(0)? - 1.0)? * -MASKED_OUT)?;
    let scores = (cos / temps.tau2)?.broadcast_add(&penalty)?;
    Ok((nn::logsumexp_last(&scores)?.squeeze(D::Minus1)? * temps.tau2)?)
}

/// InfoNCE over the batch of local matching scores, temperature `tau2`.
pub fn local_alignment_loss(
    patches: &Tensor,
    sentences: &Tensor,
    sentence_mask: &Tensor,
    temps: &TemperatureParams,
    symmetric: bool,
) -> Result<Tensor> {
    let b = patches.dims3()?.0;
    if b == 0 {
        return Err(Error::invalid("local alignment needs a non-empty batch"));
    }
    temps.validate()?;
    let counts = sentence_mask.sum(D::Minus1)?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if let Some(i) = counts.iter().position(|&c| c < 0.5) {
        return Err(Error::invalid(format!("sample {i} has no valid sentences")));
    }
    ensure_finite(patches, "patch features")?;
    ensure_finite(sentences, "sentence embeddings")?;
    let z = pairwise_z(patches, sentences, sentence_mask, temps)?;
    info_nce(&(z / temps.tau2)?, symmetric)
}
