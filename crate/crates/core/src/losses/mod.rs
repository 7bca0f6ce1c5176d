//! The four alignment and self-supervision terms of the pretraining objective.

pub mod global;
pub mod instance;
pub mod local;
pub mod modality;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

pub use global::global_alignment_loss;
pub use instance::{fuse, instance_matching_loss, sample_hard_negatives, MatchBatch, MatchHead};
pub use local::{attention_context, local_alignment_loss, local_match, pairwise_z, LocalMatch};
pub use modality::{make_mask, masked_cross_entropy, masked_mse, modality_loss, MaskPlan};

/// Temperatures for the contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureParams {
    /// Global image/report softmax temperature.
    pub tau1: f64,
    /// Smooth-max and softmax temperature of the local matching score.
    pub tau2: f64,
    /// Sentence-to-patch attention temperature.
    pub tau_att: f64,
}

impl Default for TemperatureParams {
    fn default() -> Self {
        Self {
            tau1: 0.07,
            tau2: 0.1,
            tau_att: 0.1,
        }
    }
}

impl TemperatureParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau_att", self.tau_att)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn eye(n: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::eye(n, dtype, &Device::Cpu)?)
}

pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = nn::scalar(&t.abs()?.sum_all()?)?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite values")))
    }
}

/// Cross-entropy of each row of the square `logits` against its diagonal,
/// averaged over rows; with `symmetric` also over columns, and the two
/// directions averaged.
pub fn info_nce(logits: &Tensor, symmetric: bool) -> Result<Tensor> {
    let (r, c) = logits.dims2()?;
    if r != c || r == 0 {
        return Err(Error::shape("contrastive logits", "[B, B] with B >= 1", format!("{:?}", logits.dims())));
    }
    let diag = (logits * eye(r, logits.dtype())?)?.sum(D::Minus1)?;
    let row = (nn::logsumexp_last(logits)?.squeeze(D::Minus1)? - &diag)?.mean_all()?;
    if !symmetric {
        return Ok(row);
    }
    let lt = logits.t()?.contiguous()?;
    let col = (nn::logsumexp_last(&lt)?.squeeze(D::Minus1)? - &diag)?.mean_all()?;
    Ok(((row + col)? * 0.5)?)
}
