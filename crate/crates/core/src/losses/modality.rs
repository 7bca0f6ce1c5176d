//! Single-modality self-supervision: masked patch regression for images and
//! masked token prediction for reports. Both losses are computed on masked
//! positions only.

use candle_core::{Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MASK, PERIOD};
use crate::encoders::{TextBatch, TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::nn::{self, Block, Init, LayerNorm, Linear, ParamBuilder};
use crate::seeds::{self, Stream};

/// A sorted set of masked positions out of `total`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked_indices: Vec<usize>,
    pub total: usize,
    /// Stored as the bit pattern so the plan stays `Eq`.
    ratio_bits: u64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn ratio(&self) -> f64 {
        f64::from_bits(self.ratio_bits)
    }

    pub fn count(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked_indices.binary_search(&i).is_ok()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.total).filter(|i| !self.is_masked(*i)).collect()
    }
}

/// Number of masked elements for `ratio` of `total`.
pub fn masked_count(total: usize, ratio: f64) -> usize {
    (ratio * total as f64).round() as usize
}

/// Uniform subset of size `round(ratio * total)`, without replacement.
pub fn make_mask(total: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    if total == 0 {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    let n = masked_count(total, ratio);
    if n == 0 {
        return Err(Error::invalid(format!("ratio {ratio} of {total} masks nothing")));
    }
    let mut rng = seeds::rng(seed, Stream::ImageMask, 0);
    let mut idx = rand::seq::index::sample(&mut rng, total, n).into_vec();
    idx.sort_unstable();
    Ok(MaskPlan {
        masked_indices: idx,
        total,
        ratio_bits: ratio.to_bits(),
        seed,
    })
}

/// Mean of `(pred - target)^2` over every element.
pub fn masked_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::shape("reconstruction", format!("{:?}", target.dims()), format!("{:?}", pred.dims())));
    }
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Mean cross-entropy of `logits` `[N, V]` against `targets` `[N]` (u32).
pub fn masked_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (n, _v) = logits.dims2()?;
    if n == 0 {
        return Err(Error::invalid("no masked positions"));
    }
    if targets.dims() != [n] {
        return Err(Error::shape("mlm targets", format!("[{n}]"), format!("{:?}", targets.dims())));
    }
    let logp = nn::log_softmax_last(logits)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// `L_m = L_mse + L_mlm`.
pub fn modality_loss(image_loss: &Tensor, text_loss: &Tensor) -> Result<Tensor> {
    let a = nn::scalar(image_loss)?;
    let b = nn::scalar(text_loss)?;
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid(format!("non-finite modality terms ({a}, {b})")));
    }
    Ok((image_loss + text_loss)?)
}

/// Per-patch standardization of pixel targets.
pub fn normalize_patches(pixels: &Tensor) -> Result<Tensor> {
    let mean = pixels.mean_keepdim(D::Minus1)?;
    let c = pixels.broadcast_sub(&mean)?;
    let var = c.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(c.broadcast_div(&(var + 1e-6)?.sqrt()?)?)
}

/// Flat row indices `b * per + i` for the listed positions of each sample.
fn flat_index(lists: &[Vec<usize>], per: usize) -> Result<Tensor> {
    let idx: Vec<u32> = lists
        .iter()
        .enumerate()
        .flat_map(|(b, l)| l.iter().map(move |&i| (b * per + i) as u32))
        .collect();
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, &Device::Cpu)?)
}

/// Lightweight decoder that sees encoded visible patches plus a learned mask
/// token at every masked slot and predicts each patch's target.
#[derive(Debug, Clone)]
pub struct MaeDecoder {
    embed: Linear,
    mask_token: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    pred: Linear,
}

impl MaeDecoder {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        embed_dim: usize,
        heads: usize,
        depth: usize,
        grid: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let dd = (embed_dim / 2).max(1);
        let heads = if dd.is_multiple_of(heads) { heads } else { 1 };
        let blocks = (0..depth)
            .map(|i| Block::new(&mut pb.pp(format!("blocks.{i}")), dd, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed: Linear::new(&mut pb.pp("embed"), embed_dim, dd)?,
            mask_token: pb.param("mask_token", &[1, dd], Init::Normal(0.02))?,
            pos: nn::sincos_2d(grid, dd, pb.dtype())?,
            blocks,
            ln: LayerNorm::new(&mut pb.pp("ln"), dd)?,
            pred: Linear::new(&mut pb.pp("pred"), dd, out_dim)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.pred.weight().dims()[0]
    }

    /// `visible` `[B, Nv, D]` encoded visible patches; returns predictions for
    /// all `P` slots, `[B, P, out]`.
    pub fn forward(&self, visible: &Tensor, masks: &[MaskPlan]) -> Result<Tensor> {
        let (b, nv, _) = visible.dims3()?;
        let p = masks[0].total;
        let nm = p - nv;
        let dd = self.mask_token.dims()[1];
        let vis = self.embed.forward(visible)?.reshape((b * nv, dd))?;
        let fill = self.mask_token.broadcast_as((b * nm, dd))?;
        let stacked = Tensor::cat(&[vis, fill.contiguous()?], 0)?;
        // row r of the full grid comes from stacked[order[r]]
        let mut order = vec![0u32; b * p];
        for (bi, m) in masks.iter().enumerate() {
            for (k, &j) in m.visible_indices().iter().enumerate() {
                order[bi * p + j] = (bi * nv + k) as u32;
            }
            for (k, &j) in m.masked_indices.iter().enumerate() {
                order[bi * p + j] = (b * nv + bi * nm + k) as u32;
            }
        }
        let order = Tensor::from_vec(order, b * p, &Device::Cpu)?;
        let mut x = stacked
            .index_select(&order, 0)?
            .reshape((b, p, dd))?
            .broadcast_add(&self.pos.unsqueeze(0)?)?;
        for block in &self.blocks {
            x = block.forward(&x, None)?;
        }
        self.pred.forward(&self.ln.forward(&x)?)
    }
}

/// Predicted and target values at the masked patches, `[B, N, C]` each.
#[derive(Debug, Clone)]
pub struct ReconPair {
    pub v_recon: Tensor,
    pub g_recon: Tensor,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReconTargets<'a> {
    pub norm_pix: bool,
    /// Regress these `[B, P, D]` features (detached) instead of pixels.
    pub latent: Option<&'a Tensor>,
}

/// Masked-image forward: the encoder sees only visible patches, the decoder
/// fills in the rest, and the pair is restricted to masked positions.
pub fn reconstruct(
    vision: &VisionEncoder,
    decoder: &MaeDecoder,
    images: &Tensor,
    masks: &[MaskPlan],
    targets: ReconTargets<'_>,
) -> Result<ReconPair> {
    let pixels = vision.patchify(images)?;
    let (b, p, c) = pixels.dims3()?;
    if masks.len() != b {
        return Err(Error::shape("image masks", b, masks.len()));
    }
    let nm = masks[0].count();
    for m in masks {
        if m.total != p || m.count() != nm {
            return Err(Error::shape(
                "image mask",
                format!("{nm} of {p} patches"),
                format!("{} of {}", m.count(), m.total),
            ));
        }
    }
    if nm == p {
        return Err(Error::invalid("every patch is masked"));
    }
    let visible: Vec<Vec<usize>> = masks.iter().map(MaskPlan::visible_indices).collect();
    let masked: Vec<Vec<usize>> = masks.iter().map(|m| m.masked_indices.clone()).collect();
    let nv = p - nm;
    let d = vision.config().embed_dim;

    let vis_pixels = pixels
        .reshape((b * p, c))?
        .index_select(&flat_index(&visible, p)?, 0)?
        .reshape((b, nv, c))?;
    let vis_pos_idx: Vec<u32> = visible.iter().flatten().map(|&j| j as u32).collect();
    let vis_pos = vision
        .pos_table()
        .index_select(&Tensor::from_vec(vis_pos_idx, b * nv, &Device::Cpu)?, 0)?
        .reshape((b, nv, d))?;
    let bias = vision.window_bias(&visible)?;
    let encoded = vision.encode_patches(&vis_pixels, &vis_pos, bias.as_ref())?;
    let pred = decoder.forward(&encoded, masks)?;
    let out = pred.dims()[2];

    let masked_idx = flat_index(&masked, p)?;
    let v_recon = pred.reshape((b * p, out))?.index_select(&masked_idx, 0)?.reshape((b, nm, out))?;
    let full_target = match targets.latent {
        Some(lat) => lat.detach(),
        None if targets.norm_pix => normalize_patches(&pixels)?,
        None => pixels,
    };
    let tc = full_target.dims()[2];
    if tc != out {
        return Err(Error::shape("decoder output width", tc, out));
    }
    let g_recon = full_target
        .reshape((b * p, tc))?
        .index_select(&masked_idx, 0)?
        .reshape((b, nm, tc))?;
    Ok(ReconPair { v_recon, g_recon })
}

pub fn image_recon_loss(
    vision: &VisionEncoder,
    decoder: &MaeDecoder,
    images: &Tensor,
    masks: &[MaskPlan],
    targets: ReconTargets<'_>,
) -> Result<Tensor> {
    let pair = reconstruct(vision, decoder, images, masks, targets)?;
    masked_mse(&pair.v_recon, &pair.g_recon)
}

/// Masked report inputs plus where to read predictions and what they should be.
#[derive(Debug, Clone)]
pub struct MlmMasking {
    pub inputs: Tensor,
    pub positions: Tensor,
    pub targets: Tensor,
    pub plans: Vec<MaskPlan>,
}

/// Masks `ratio` of each report's tokens. A masked token becomes `[MASK]`
/// with probability 0.8, a random word with 0.1, and stays as is with 0.1.
pub fn mask_tokens(batch: &TextBatch, ratio: f64, vocab_size: usize, seed: u64) -> Result<MlmMasking> {
    let t = batch.seq_len();
    let mut inputs: Vec<u32> = Vec::with_capacity(batch.batch_size() * t);
    let mut lists = Vec::with_capacity(batch.batch_size());
    let mut targets = Vec::new();
    let mut plans = Vec::with_capacity(batch.batch_size());
    for (b, ids) in batch.ids.iter().enumerate() {
        let plan = make_mask(ids.len(), ratio, seeds::derive(seed, Stream::TextMask, b as u64))?;
        let mut rng = seeds::rng(seed, Stream::TextMask, (b as u64) << 32 | 1);
        let mut row = ids.clone();
        for &j in &plan.masked_indices {
            targets.push(ids[j]);
            let r: f64 = rng.random();
            if r < 0.8 {
                row[j] = MASK;
            } else if r < 0.9 {
                row[j] = rng.random_range(PERIOD..vocab_size as u32);
            }
        }
        row.resize(t, crate::data::PAD);
        inputs.extend(row);
        lists.push(plan.masked_indices.clone());
        plans.push(plan);
    }
    let n = targets.len();
    Ok(MlmMasking {
        inputs: Tensor::from_vec(inputs, (batch.batch_size(), t), &Device::Cpu)?,
        positions: flat_index(&lists, t)?,
        targets: Tensor::from_vec(targets, n, &Device::Cpu)?,
        plans,
    })
}

#[derive(Debug, Clone)]
pub struct MlmHead {
    proj: Linear,
}

impl MlmHead {
    pub fn new(pb: &mut ParamBuilder<'_>, embed_dim: usize, vocab_size: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&mut pb.pp("proj"), embed_dim, vocab_size)?,
        })
    }

    pub fn forward(&self, hidden: &Tensor) -> Result<Tensor> {
        self.proj.forward(hidden)
    }
}

/// Logits at the masked positions, `[N, V]`.
pub fn mlm_logits(text: &TextEncoder, head: &MlmHead, batch: &TextBatch, masking: &MlmMasking) -> Result<Tensor> {
    let feats = text.forward_ids(batch, &masking.inputs)?;
    let (b, t, d) = feats.hidden.dims3()?;
    let picked = feats.hidden.reshape((b * t, d))?.index_select(&masking.positions, 0)?;
    head.forward(&picked)
}

pub fn mlm_loss(text: &TextEncoder, head: &MlmHead, batch: &TextBatch, masking: &MlmMasking) -> Result<Tensor> {
    if masking.targets.elem_count() == 0 {
        return Err(Error::invalid("no masked positions"));
    }
    masked_cross_entropy(&mlm_logits(text, head, batch, masking)?, &masking.targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use candle_core::DType;

    #[test]
    fn mask_count_and_determinism() {
        let m = make_mask(16, 0.75, 3).unwrap();
        assert_eq!(m.count(), 12);
        assert_eq!(m, make_mask(16, 0.75, 3).unwrap());
        assert!(m.masked_indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(m.visible_indices().len(), 4);
    }

    #[test]
    fn degenerate_masks_rejected() {
        assert!(make_mask(4, 0.1, 0).is_err());
        assert!(make_mask(0, 0.5, 0).is_err());
        assert!(make_mask(10, 1.0, 0).is_err());
        assert!(make_mask(10, 0.0, 0).is_err());
    }

    #[test]
    fn mse_closed_forms() {
        let t = Tensor::new(&[[[0.1f64, 0.4], [0.9, -0.2]]], &Device::Cpu).unwrap();
        assert_eq!(scalar(&masked_mse(&t, &t).unwrap()).unwrap(), 0.0);
        let shifted = (&t + 0.3).unwrap();
        assert!((scalar(&masked_mse(&shifted, &t).unwrap()).unwrap() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 37;
        let logits = Tensor::zeros((5, v), DType::F64, &Device::Cpu).unwrap();
        let targets = Tensor::new(&[0u32, 3, 7, 36, 12], &Device::Cpu).unwrap();
        let l = scalar(&masked_cross_entropy(&logits, &targets).unwrap()).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let mut data = vec![-1e4f64; 2 * 4];
        data[1] = 1e4;
        data[4 + 2] = 1e4;
        let logits = Tensor::from_vec(data, (2, 4), &Device::Cpu).unwrap();
        let targets = Tensor::new(&[1u32, 2], &Device::Cpu).unwrap();
        assert!(scalar(&masked_cross_entropy(&logits, &targets).unwrap()).unwrap() < 1e-9);
        let none = Tensor::zeros((0, 4), DType::F64, &Device::Cpu).unwrap();
        let empty = Tensor::zeros(0, DType::U32, &Device::Cpu).unwrap();
        assert!(masked_cross_entropy(&none, &empty).is_err());
    }

    #[test]
    fn modality_sum() {
        let a = Tensor::new(0.5f64, &Device::Cpu).unwrap();
        let b = Tensor::new(1.5f64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&modality_loss(&a, &b).unwrap()).unwrap(), 2.0);
        let z = Tensor::new(0.0f64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&modality_loss(&z, &z).unwrap()).unwrap(), 0.0);
        let nan = Tensor::new(f64::NAN, &Device::Cpu).unwrap();
        assert!(modality_loss(&nan, &z).is_err());
    }
}
