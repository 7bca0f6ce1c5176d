//! Evaluation protocols on held-out synthetic data: zero-shot classification,
//! phrase grounding, linear probing and the scale ablation matrix.

mod ablation;
mod grounding;
pub mod metrics;
mod probe;
mod report;
mod zero_shot;

pub use ablation::{run_ablation, run_ablation_with, AblationRow, AblationTable};
pub use grounding::{
    ground_from_heatmap, ground_phrase, ground_samples, overlay_file_name, threshold_region,
    write_overlay, GroundingOptions, GroundingResult, Heatmap, HeatmapMode, PredictedRegion,
};
pub use metrics::{accuracy, cnr, cnr_split, iou, macro_auc, miou, roc_auc, PixelMask};
pub use probe::{
    fit_softmax_regression, linear_probe, linear_probe_features, stratified_subset, ProbeConfig,
    ProbeResult, PROBE_FRACTIONS,
};
pub use report::{ClassScore, MetricsReport};
pub use zero_shot::{
    class_labels, default_prompts, zero_shot_classify, zero_shot_from_embeddings, ZeroShotResult,
};

use candle_core::Tensor;

use crate::data::{GenConfig, SyntheticSample, Vocabulary};
use crate::encoders::{images_tensor, TextBatch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn;
use crate::seeds::{self, Stream};

const CHUNK: usize = 64;

/// Unit-norm global image embeddings, one row per image.
pub fn image_embeddings(model: &Model, samples: &[&SyntheticSample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let feats = model.vision.forward(&image_batch(model, chunk)?)?;
        out.extend(nn::rows_f64(&feats.global)?);
    }
    Ok(out)
}

fn image_batch(model: &Model, samples: &[&SyntheticSample]) -> Result<Tensor> {
    let imgs: Vec<&[f32]> = samples.iter().map(|s| s.image.as_slice()).collect();
    images_tensor(&imgs, model.config().image_size, model.params().dtype())
}

/// Global and sentence-slot embeddings of free-text reports; each text is
/// tokenized on its own. Returns `(global rows, first-sentence rows)`.
pub fn text_embeddings(model: &Model, texts: &[&str]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let vocab = Vocabulary::standard();
    let tokens = texts.iter().map(|t| vocab.tokenize(t)).collect::<Result<Vec<_>>>()?;
    let mut global = Vec::with_capacity(texts.len());
    let mut first = Vec::with_capacity(texts.len());
    for chunk in tokens.chunks(CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = TextBatch::new(&refs, model.config(), model.params().dtype())?;
        let feats = model.text.forward(&batch)?;
        global.extend(nn::rows_f64(&feats.global)?);
        first.extend(nn::rows_f64(&feats.sentences.narrow(1, 0, 1)?.squeeze(1)?)?);
    }
    Ok((global, first))
}

/// Held-out evaluation sets, disjoint in seed from any training corpus.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    /// Single-motif images for zero-shot classification.
    pub zero_shot: Vec<SyntheticSample>,
    /// Default-config samples whose motif sentences carry boxes.
    pub grounding: Vec<SyntheticSample>,
    /// Labeled single-motif pool the probe subsets are drawn from.
    pub probe_pool: Vec<SyntheticSample>,
    pub probe_test: Vec<SyntheticSample>,
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteSizes {
    pub zero_shot: usize,
    pub grounding: usize,
    pub probe_pool: usize,
    pub probe_test: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            zero_shot: 500,
            grounding: 200,
            probe_pool: 1000,
            probe_test: 500,
        }
    }
}

impl EvalSuite {
    pub fn generate(gen: &GenConfig, seed: u64, sizes: SuiteSizes) -> Result<Self> {
        let single = gen.single_motif();
        let split = |k: u64| seeds::derive(seed, Stream::EvalSplit, k);
        let make = |n: usize, cfg: &GenConfig, k: u64| -> Result<Vec<SyntheticSample>> {
            if n == 0 {
                return Ok(Vec::new());
            }
            crate::data::generate_corpus(n, cfg, split(k))
        };
        Ok(Self {
            zero_shot: make(sizes.zero_shot, &single, 0)?,
            grounding: make(sizes.grounding, gen, 1)?,
            probe_pool: make(sizes.probe_pool, &single, 2)?,
            probe_test: make(sizes.probe_test, &single, 3)?,
        })
    }
}

pub(crate) fn non_empty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    Ok(())
}
