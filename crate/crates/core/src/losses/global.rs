use candle_core::Tensor;

use super::{ensure_finite, info_nce};
use crate::error::{Error, Result};

/// Image/report InfoNCE over the batch similarity matrix `v tᵀ / tau1`.
///
/// Rows of `v` and `t` are expected to be unit-norm, so `v tᵀ` holds cosine
/// similarities. With `symmetric` the image-anchored and report-anchored
/// terms are averaged; otherwise only the image-anchored term (softmax over
/// reports) is returned.
pub fn global_alignment_loss(v: &Tensor, t: &Tensor, tau1: f64, symmetric: bool) -> Result<Tensor> {
    let (b, d) = v.dims2()?;
    if b == 0 {
        return Err(Error::invalid("global alignment needs a non-empty batch"));
    }
    if t.dims() != [b, d] {
        return Err(Error::shape("report embeddings", format!("[{b}, {d}]"), format!("{:?}", t.dims())));
    }
    if !(tau1 > 0.0) {
        return Err(Error::invalid(format!("tau1 must be positive, got {tau1}")));
    }
    ensure_finite(v, "image embeddings")?;
    ensure_finite(t, "report embeddings")?;
    let logits = (v.matmul(&t.t()?)? / tau1)?;
    info_nce(&logits, symmetric)
}
