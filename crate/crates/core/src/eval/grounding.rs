use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{cnr, iou, PixelMask};
use super::{image_batch, text_embeddings, CHUNK};
use crate::data::{BoundingBox, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapMode {
    /// Cosine similarity of the sentence embedding with each patch.
    Cosine,
    /// Softmax of those similarities at the attention temperature.
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingOptions {
    pub mode: HeatmapMode,
    /// Region threshold in standard deviations above the heatmap mean.
    pub k: f64,
    pub tau_att: f64,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        Self {
            mode: HeatmapMode::Cosine,
            k: 1.0,
            tau_att: 0.1,
        }
    }
}

/// Row-major `[grid, grid]` patch scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(grid: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid * grid || grid == 0 {
            return Err(Error::shape("heatmap", grid * grid, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("heatmap has non-finite values"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.len(), rows.concat())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.grid).map(<[f64]>::to_vec).collect()
    }

    /// Nearest-neighbour upsampling to `size x size` pixels.
    pub fn to_pixels(&self, size: usize) -> Result<Vec<f64>> {
        if !size.is_multiple_of(self.grid) {
            return Err(Error::shape("heatmap upsampling", format!("a multiple of {}", self.grid), size));
        }
        let cell = size / self.grid;
        Ok((0..size * size)
            .map(|i| self.values[(i / size / cell) * self.grid + (i % size) / cell])
            .collect())
    }

    fn mean_std(&self) -> (f64, f64) {
        let n = self.values.len() as f64;
        let m = self.values.iter().sum::<f64>() / n;
        (m, (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedRegion {
    #[serde(skip)]
    pub mask: Option<PixelMask>,
    pub bbox: Option<BoundingBox>,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub sample: u64,
    pub sentence: String,
    pub heatmap: Heatmap,
    pub region: PredictedRegion,
    pub target: BoundingBox,
    pub iou: f64,
    pub cnr: f64,
}

/// Patches scoring strictly above `mean + k * std`, upsampled to pixels. A
/// uniform heatmap therefore yields an empty region for any `k >= 0`.
pub fn threshold_region(heatmap: &Heatmap, k: f64, size: usize) -> Result<PredictedRegion> {
    let (m, s) = heatmap.mean_std();
    // the rounded mean of a constant map can sit just below the constant
    let flat = heatmap.values.iter().all(|&v| v == heatmap.values[0]);
    let cut = if flat { f64::INFINITY } else { m + k * s };
    let hot = Heatmap::new(
        heatmap.grid,
        heatmap.values.iter().map(|&v| if v > cut { 1.0 } else { 0.0 }).collect(),
    )?;
    let mask = PixelMask {
        size,
        bits: hot.to_pixels(size)?.into_iter().map(|v| v > 0.5).collect(),
    };
    Ok(PredictedRegion {
        bbox: mask.bounding_box(),
        pixels: mask.count(),
        mask: Some(mask),
    })
}

/// Scores a heatmap against a box: IoU of the thresholded region and CNR of
/// the pixel-upsampled heatmap.
pub fn ground_from_heatmap(
    sample: u64,
    sentence: &str,
    heatmap: Heatmap,
    target: BoundingBox,
    k: f64,
    size: usize,
) -> Result<GroundingResult> {
    let region = threshold_region(&heatmap, k, size)?;
    let truth = PixelMask::from_box(&target, size);
    let iou = iou(region.mask.as_ref().expect("threshold_region sets the mask"), &truth)?;
    let cnr = cnr(&heatmap.to_pixels(size)?, size, &target)?;
    Ok(GroundingResult {
        sample,
        sentence: sentence.to_string(),
        heatmap,
        region,
        target,
        iou,
        cnr,
    })
}

fn heatmaps(model: &Model, samples: &[&SyntheticSample], sentences: &[Vec<f64>], opts: &GroundingOptions) -> Result<Vec<Heatmap>> {
    let grid = model.config().grid();
    let feats = model.vision.forward(&image_batch(model, samples)?)?;
    let patches = nn::rows_f64(&nn::l2_normalize(&feats.patches)?)?;
    let p = grid * grid;
    samples
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let t = &sentences[i];
            let cos: Vec<f64> = patches[i * p..(i + 1) * p]
                .iter()
                .map(|row| row.iter().zip(t).map(|(a, b)| a * b).sum())
                .collect();
            let values = match opts.mode {
                HeatmapMode::Cosine => cos,
                HeatmapMode::Attention => {
                    let m = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = cos.iter().map(|c| ((c - m) / opts.tau_att).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.into_iter().map(|x| x / z).collect()
                }
            };
            Heatmap::new(grid, values)
        })
        .collect()
}

/// Grounds one sentence in one image.
pub fn ground_phrase(
    model: &Model,
    sample: &SyntheticSample,
    sentence: &str,
    target: BoundingBox,
    opts: &GroundingOptions,
) -> Result<GroundingResult> {
    let (_, sent) = text_embeddings(model, &[sentence])?;
    let hm = heatmaps(model, &[sample], &sent, opts)?.remove(0);
    ground_from_heatmap(sample.index, sentence, hm, target, opts.k, model.config().image_size)
}

/// Grounds every boxed sentence of `samples`, in order, up to `limit` results.
pub fn ground_samples(
    model: &Model,
    samples: &[SyntheticSample],
    opts: &GroundingOptions,
    limit: Option<usize>,
) -> Result<Vec<GroundingResult>> {
    let mut queries: Vec<(&SyntheticSample, String, BoundingBox)> = Vec::new();
    'outer: for s in samples {
        for (k, b) in s.boxes.iter().enumerate() {
            if limit.is_some_and(|l| queries.len() >= l) {
                break 'outer;
            }
            if let Some(b) = b {
                let vocab = crate::data::Vocabulary::standard();
                let text = vocab.detokenize(&crate::data::TokenizedReport {
                    ids: s.tokens.sentence(k).to_vec(),
                    spans: vec![(0, s.tokens.sentence(k).len())],
                })?;
                queries.push((s, text, *b));
            }
        }
    }
    if queries.is_empty() {
        return Err(Error::invalid("no boxed sentences to ground"));
    }
    let size = model.config().image_size;
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(CHUNK) {
        let texts: Vec<&str> = chunk.iter().map(|q| q.1.as_str()).collect();
        let (_, sent) = text_embeddings(model, &texts)?;
        let imgs: Vec<&SyntheticSample> = chunk.iter().map(|q| q.0).collect();
        for (q, hm) in chunk.iter().zip(heatmaps(model, &imgs, &sent, opts)?) {
            out.push(ground_from_heatmap(q.0.index, &q.1, hm, q.2, opts.k, size)?);
        }
    }
    Ok(out)
}

/// `<sample>_<sentence words joined by underscores>.png`
pub fn overlay_file_name(result: &GroundingResult) -> String {
    let words: Vec<String> = result
        .sentence
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    format!("{:06}_{}.png", result.sample, words.join("_"))
}

/// Writes the image with the heatmap blended in red, the annotated box in
/// green and the predicted box in yellow.
pub fn write_overlay(dir: &Path, sample: &SyntheticSample, result: &GroundingResult) -> Result<PathBuf> {
    let size = sample.size;
    let heat = result.heatmap.to_pixels(size)?;
    let (lo, hi) = heat.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let g = sample.pixel(x, y) as f64;
            let h = (heat[y * size + x] - lo) / span;
            let px = [
                (255.0 * (0.5 * g + 0.5 * h)) as u8,
                (255.0 * 0.5 * g) as u8,
                (255.0 * 0.5 * g) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut outline = |b: &BoundingBox, color: [u8; 3]| {
        for x in b.x0..b.x1 {
            img.put_pixel(x, b.y0, image::Rgb(color));
            img.put_pixel(x, b.y1 - 1, image::Rgb(color));
        }
        for y in b.y0..b.y1 {
            img.put_pixel(b.x0, y, image::Rgb(color));
            img.put_pixel(b.x1 - 1, y, image::Rgb(color));
        }
    };
    outline(&result.target, [0, 255, 0]);
    if let Some(b) = &result.region.bbox {
        outline(b, [255, 255, 0]);
    }
    let path = dir.join(overlay_file_name(result));
    img.save(&path)?;
    Ok(path)
}
