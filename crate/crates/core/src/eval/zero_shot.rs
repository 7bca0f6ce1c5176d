use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, argmax, macro_auc, per_class_auc};
use super::{image_embeddings, text_embeddings};
use crate::data::{MotifKind, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::Model;

/// One class sentence per motif kind, e.g. "there is a blob."
pub fn default_prompts() -> Vec<String> {
    MotifKind::ALL.iter().map(|k| k.prompt()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    /// `scores[i][c]`: inner product of image `i` with prompt `c`.
    pub scores: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub accuracy: f64,
    /// One-vs-rest AUC per class; `None` when the class is absent.
    pub per_class_auc: Vec<Option<f64>>,
    /// Mean of the defined per-class AUCs.
    pub auc: f64,
}

/// Class index of every sample; multi-motif samples are rejected.
pub fn class_labels(samples: &[SyntheticSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.single_class().ok_or_else(|| {
                Error::invalid(format!(
                    "sample {} has {} motif kinds; classification needs exactly one",
                    s.index,
                    s.motif_kinds().len()
                ))
            })
        })
        .collect()
}

/// Scores by inner product, predicts by argmax (ties to the lower class
/// index) and reports accuracy and one-vs-rest AUC.
pub fn zero_shot_from_embeddings(images: &[Vec<f64>], prompts: &[Vec<f64>], labels: &[usize]) -> Result<ZeroShotResult> {
    if prompts.len() < 2 {
        return Err(Error::invalid("zero-shot classification needs at least two classes"));
    }
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::shape("zero-shot labels", images.len(), labels.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= prompts.len()) {
        return Err(Error::invalid(format!("label {l} has no prompt")));
    }
    let scores: Vec<Vec<f64>> = images
        .iter()
        .map(|v| prompts.iter().map(|t| v.iter().zip(t).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let predictions: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let per_class = per_class_auc(&scores, labels, prompts.len())?;
    Ok(ZeroShotResult {
        accuracy: accuracy(&predictions, labels)?,
        auc: macro_auc(&per_class)?,
        per_class_auc: per_class,
        predictions,
        labels: labels.to_vec(),
        scores,
    })
}

pub fn zero_shot_classify(model: &Model, samples: &[SyntheticSample], prompts: &[String]) -> Result<ZeroShotResult> {
    super::non_empty(samples, "zero-shot image set")?;
    let labels = class_labels(samples)?;
    let refs: Vec<&SyntheticSample> = samples.iter().collect();
    let images = image_embeddings(model, &refs)?;
    let texts: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let (prompt_emb, _) = text_embeddings(model, &texts)?;
    zero_shot_from_embeddings(&images, &prompt_emb, &labels)
}
