//! The weighted four-term objective.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, TrainConfig};
use crate::data::SyntheticSample;
use crate::encoders::{images_tensor, EncoderConfig, TextBatch};
use crate::error::{Error, Result, Scale};
use crate::losses::instance::{instance_matching_loss, sample_hard_negatives, MatchBatch};
use crate::losses::modality::{self, image_recon_loss, mask_tokens, mlm_loss, MaskPlan, ReconTargets};
use crate::losses::{global_alignment_loss, local_alignment_loss};
use crate::model::Model;
use crate::nn;
use crate::seeds::{self, Stream};

/// Per-step loss values. Disabled scales are `None` and contribute nothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_g: f64,
    pub l_l: Option<f64>,
    pub l_i: Option<f64>,
    pub l_m: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn from_components(weights: &LossWeights, l_g: f64, l_l: Option<f64>, l_i: Option<f64>, l_m: Option<f64>) -> Self {
        let total = weights.lambda1 * l_g
            + l_l.map_or(0.0, |x| weights.lambda2 * x)
            + l_i.map_or(0.0, |x| weights.lambda3 * x)
            + l_m.map_or(0.0, |x| weights.lambda4 * x);
        Self { l_g, l_l, l_i, l_m, total }
    }

    pub fn is_finite(&self) -> bool {
        [Some(self.l_g), self.l_l, self.l_i, self.l_m, Some(self.total)]
            .iter()
            .flatten()
            .all(|x| x.is_finite())
    }

    pub fn breakdown(&self) -> String {
        let f = |x: Option<f64>| x.map_or("off".to_string(), |v| format!("{v}"));
        format!(
            "l_g={} l_l={} l_i={} l_m={} total={}",
            self.l_g,
            f(self.l_l),
            f(self.l_i),
            f(self.l_m),
            self.total
        )
    }
}

/// Images and reports of one minibatch, ready for the encoders.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: Tensor,
    pub text: TextBatch,
}

impl TrainBatch {
    pub fn new(samples: &[&SyntheticSample], cfg: &EncoderConfig, dtype: DType) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let imgs: Vec<&[f32]> = samples.iter().map(|s| s.image.as_slice()).collect();
        let reports: Vec<_> = samples.iter().map(|s| &s.tokens).collect();
        Ok(Self {
            images: images_tensor(&imgs, cfg.image_size, dtype)?,
            text: TextBatch::new(&reports, cfg, dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.text.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeds for the stochastic parts of one step.
pub fn step_seed(run_seed: u64, stream: Stream, step: u64) -> u64 {
    seeds::derive(run_seed, stream, step)
}

/// Computes every enabled term and the weighted total. Disabled scales are
/// skipped entirely, so their heads get no gradient. Returns the bundle and
/// the differentiable total.
pub fn combined_loss(model: &Model, batch: &TrainBatch, cfg: &TrainConfig, step: u64) -> Result<(LossBundle, Tensor)> {
    let temps = &cfg.temperature;
    let sym = cfg.loss.symmetric;
    let w = &cfg.weights;
    let b = batch.len();

    let vis = model.vision.forward(&batch.images).map_err(|e| e.in_scale(Scale::Global))?;
    let txt = model.text.forward(&batch.text).map_err(|e| e.in_scale(Scale::Global))?;

    let l_g = global_alignment_loss(&vis.global, &txt.global, temps.tau1, sym).map_err(|e| e.in_scale(Scale::Global))?;
    let mut total = (&l_g * w.lambda1)?;

    let l_l = if cfg.scales.local {
        let l = local_alignment_loss(&vis.patches, &txt.sentences, &txt.sentence_mask, temps, sym)
            .map_err(|e| e.in_scale(Scale::Local))?;
        total = (total + (&l * w.lambda2)?)?;
        Some(l)
    } else {
        None
    };

    let l_i = if cfg.scales.instance {
        let l = (|| -> Result<Tensor> {
            let sim = (vis.global.detach().matmul(&txt.global.detach().t()?)? / temps.tau1)?
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?;
            let (neg_t, neg_v) = sample_hard_negatives(&sim, step_seed(cfg.seed, Stream::HardNegative, step))?;
            let mb = MatchBatch::build(&vis.global, &txt.global, &neg_t, &neg_v, &model.match_head)?;
            instance_matching_loss(&mb.probs, &mb.labels)
        })()
        .map_err(|e| e.in_scale(Scale::Instance))?;
        total = (total + (&l * w.lambda3)?)?;
        Some(l)
    } else {
        None
    };

    let l_m = if cfg.scales.modality {
        let l = (|| -> Result<Tensor> {
            let p = model.config().num_patches();
            let base = step_seed(cfg.seed, Stream::ImageMask, step);
            let masks: Vec<MaskPlan> = (0..b)
                .map(|i| modality::make_mask(p, cfg.masking.image_ratio, seeds::derive(base, Stream::ImageMask, i as u64)))
                .collect::<Result<_>>()?;
            let targets = ReconTargets {
                norm_pix: cfg.masking.norm_pix_target,
                latent: cfg.masking.latent_targets.then_some(&vis.hidden),
            };
            let l_mse = image_recon_loss(&model.vision, &model.decoder, &batch.images, &masks, targets)?;
            let masking = mask_tokens(
                &batch.text,
                cfg.masking.text_ratio,
                model.config().vocab_size,
                step_seed(cfg.seed, Stream::TextMask, step),
            )?;
            let l_mlm = mlm_loss(&model.text, &model.mlm_head, &batch.text, &masking)?;
            modality::modality_loss(&l_mse, &l_mlm)
        })()
        .map_err(|e| e.in_scale(Scale::Modality))?;
        total = (total + (&l * w.lambda4)?)?;
        Some(l)
    } else {
        None
    };

    let read = |t: &Tensor| nn::scalar(t);
    let bundle = LossBundle::from_components(
        w,
        read(&l_g)?,
        l_l.as_ref().map(read).transpose()?,
        l_i.as_ref().map(read).transpose()?,
        l_m.as_ref().map(read).transpose()?,
    );
    if !bundle.is_finite() {
        return Err(Error::NonFinite {
            step,
            breakdown: bundle.breakdown(),
        });
    }
    Ok((bundle, total))
}
