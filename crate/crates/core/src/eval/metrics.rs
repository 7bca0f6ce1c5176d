//! Scalar metrics: IoU, mIoU, contrast-to-noise ratio, ROC AUC, accuracy.

use crate::data::BoundingBox;
use crate::error::{Error, Result};

/// Binary pixel mask of a `size x size` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub size: usize,
    pub bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            bits: vec![false; size * size],
        }
    }

    pub fn from_box(b: &BoundingBox, size: usize) -> Self {
        let mut m = Self::empty(size);
        for y in b.y0 as usize..(b.y1 as usize).min(size) {
            for x in b.x0 as usize..(b.x1 as usize).min(size) {
                m.bits[y * size + x] = true;
            }
        }
        m
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Tight half-open box around the set pixels, if any.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            let (x, y) = ((i % self.size) as u32, (i / self.size) as u32);
            bb = Some(match bb {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        bb.map(|(x0, y0, x1, y1)| BoundingBox::new(x0, y0, x1, y1))
    }
}

/// Intersection over union of two masks; two empty masks give 0.
pub fn iou(a: &PixelMask, b: &PixelMask) -> Result<f64> {
    if a.size != b.size {
        return Err(Error::shape("iou masks", a.size, b.size));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Arithmetic mean of per-item IoU values.
pub fn miou(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::invalid("mIoU of an empty result list"));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Contrast-to-noise ratio of `values` inside versus outside a region:
/// `(mu_in - mu_out) / sqrt((var_in + var_out) / 2)` with population
/// variances.
pub fn cnr_split(inside: &[f64], outside: &[f64]) -> Result<f64> {
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::Degenerate(format!(
            "CNR needs values on both sides of the box ({} inside, {} outside)",
            inside.len(),
            outside.len()
        )));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
    };
    let (mi, vi) = stats(inside);
    let (mo, vo) = stats(outside);
    let denom = ((vi + vo) / 2.0).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate(format!(
            "CNR undefined: zero variance inside and outside the box (means {mi} and {mo})"
        )));
    }
    Ok((mi - mo) / denom)
}

/// CNR of a pixel-resolution map against a box.
pub fn cnr(pixel_map: &[f64], size: usize, b: &BoundingBox) -> Result<f64> {
    if pixel_map.len() != size * size {
        return Err(Error::shape("CNR map", size * size, pixel_map.len()));
    }
    let mask = PixelMask::from_box(b, size);
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (v, m) in pixel_map.iter().zip(&mask.bits) {
        if *m { inside.push(*v) } else { outside.push(*v) }
    }
    cnr_split(&inside, &outside)
}

/// Binary ROC AUC via the Mann-Whitney statistic with average ranks for ties.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape("AUC labels", scores.len(), positive.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("AUC scores must be finite"));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(format!("AUC needs both classes ({n_pos} positive, {n_neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| positive[order[k]]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC per class; classes absent from `labels` (or covering all
/// of it) get `None`.
pub fn per_class_auc(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("score rows", labels.len(), scores.len()));
    }
    (0..num_classes)
        .map(|c| {
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            match roc_auc(&col, &pos) {
                Ok(a) => Ok(Some(a)),
                Err(Error::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Unweighted mean of the defined per-class AUCs.
pub fn macro_auc(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Degenerate("no class has both positives and negatives".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape("accuracy inputs", labels.len(), predictions.len()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
