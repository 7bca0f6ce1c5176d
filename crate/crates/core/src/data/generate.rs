use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenizedReport, Vocabulary};
use crate::error::{Error, Result};
use crate::seeds::{self, Stream};

/// Shape classes planted in the images; each one has a word in the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotifKind {
    Blob,
    Ring,
    Bar,
    Cross,
}

impl MotifKind {
    pub const ALL: [MotifKind; 4] = [
        MotifKind::Blob,
        MotifKind::Ring,
        MotifKind::Bar,
        MotifKind::Cross,
    ];

    pub fn word(self) -> &'static str {
        match self {
            MotifKind::Blob => "blob",
            MotifKind::Ring => "ring",
            MotifKind::Bar => "bar",
            MotifKind::Cross => "cross",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Zero-shot prompt for this class.
    pub fn prompt(self) -> String {
        format!("there is a {}.", self.word())
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> u64 {
        (self.x1.saturating_sub(self.x0) as u64) * (self.y1.saturating_sub(self.y0) as u64)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, other: &BoundingBox, gap: u32) -> bool {
        self.x0 < other.x1 + gap
            && other.x0 < self.x1 + gap
            && self.y0 < other.y1 + gap
            && other.y0 < self.y1 + gap
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub image_size: usize,
    pub min_motifs: usize,
    pub max_motifs: usize,
    /// Motif extent in pixels, inclusive range.
    pub motif_min: usize,
    pub motif_max: usize,
    /// Probability that a motif sentence names the quadrant.
    pub location_prob: f64,
    pub max_distractors: usize,
    pub background: f64,
    pub noise_std: f64,
    pub intensity: f64,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_motifs: 1,
            max_motifs: 3,
            motif_min: 12,
            motif_max: 20,
            location_prob: 0.7,
            max_distractors: 2,
            background: 0.1,
            noise_std: 0.05,
            intensity: 0.8,
            max_retries: 50,
        }
    }
}

impl GenConfig {
    /// One motif per image, so the class label is a single motif kind.
    pub fn single_motif(&self) -> Self {
        Self {
            min_motifs: 1,
            max_motifs: 1,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_motifs == 0 || self.min_motifs > self.max_motifs {
            return Err(Error::Config(format!(
                "motif count range [{}, {}] is empty or starts at zero",
                self.min_motifs, self.max_motifs
            )));
        }
        if self.max_motifs > MotifKind::ALL.len() {
            return Err(Error::Config(format!(
                "at most {} distinct motifs per image",
                MotifKind::ALL.len()
            )));
        }
        if self.motif_min < 4 || self.motif_min > self.motif_max || self.motif_max > self.image_size
        {
            return Err(Error::Config(format!(
                "motif size range [{}, {}] does not fit a {} px image",
                self.motif_min, self.motif_max, self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.location_prob) {
            return Err(Error::Config("location_prob must be in [0, 1]".into()));
        }
        if self.max_distractors > DISTRACTORS.len() {
            return Err(Error::Config(format!(
                "at most {} distractor sentences",
                DISTRACTORS.len()
            )));
        }
        Ok(())
    }
}

const DISTRACTORS: [&str; 5] = [
    "the background is clear.",
    "no other findings are seen.",
    "image quality is adequate.",
    "the field is otherwise unremarkable.",
    "the noise level is low.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub index: u64,
    pub seed: u64,
    pub size: usize,
    /// Row-major `[size, size]` grayscale pixels, each a multiple of 1/255.
    pub image: Vec<f32>,
    pub report: String,
    pub tokens: TokenizedReport,
    /// One entry per sentence; `None` for distractor sentences.
    pub boxes: Vec<Option<BoundingBox>>,
    pub sentence_kinds: Vec<Option<MotifKind>>,
    /// Bitmask over [`MotifKind`] indices of the motifs present.
    pub class_label: u32,
}

impl SyntheticSample {
    pub fn motif_kinds(&self) -> Vec<MotifKind> {
        MotifKind::ALL
            .iter()
            .copied()
            .filter(|k| self.class_label & (1 << k.index()) != 0)
            .collect()
    }

    /// Class index when exactly one motif kind is present.
    pub fn single_class(&self) -> Option<usize> {
        match self.motif_kinds().as_slice() {
            [k] => Some(k.index()),
            _ => None,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> f32 {
        self.image[y * self.size + x]
    }
}

fn quadrant_words(b: &BoundingBox, size: usize) -> (&'static str, &'static str) {
    let (cx, cy) = b.center();
    let half = size as f64 / 2.0;
    (
        if cy < half { "upper" } else { "lower" },
        if cx < half { "left" } else { "right" },
    )
}

/// Renders `kind` in the `s x s` square at `(x0, y0)`; returns the tight box.
fn draw_motif(
    img: &mut [f64],
    size: usize,
    kind: MotifKind,
    x0: usize,
    y0: usize,
    s: usize,
    intensity: f64,
    rng: &mut ChaCha8Rng,
) -> BoundingBox {
    let r = s as f64 / 2.0;
    let thick = (s / 5).max(3) as f64;
    let horizontal = rng.random_bool(0.5);
    let inside = |dx: f64, dy: f64| -> bool {
        // offsets of the pixel center from the square center
        match kind {
            MotifKind::Blob => dx * dx + dy * dy <= r * r,
            MotifKind::Ring => {
                let d2 = dx * dx + dy * dy;
                let inner = (r - thick.max(2.5)).max(0.0);
                d2 <= r * r && d2 >= inner * inner
            }
            MotifKind::Bar => {
                let (across, _) = if horizontal { (dy, dx) } else { (dx, dy) };
                across.abs() <= thick * 0.8
            }
            MotifKind::Cross => dx.abs() <= thick / 2.0 || dy.abs() <= thick / 2.0,
        }
    };
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            let dx = x as f64 + 0.5 - (x0 as f64 + r);
            let dy = y as f64 + 0.5 - (y0 as f64 + r);
            if inside(dx, dy) {
                let p = &mut img[y * size + x];
                *p = p.max(intensity);
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
    }
    BoundingBox::new(bx0 as u32, by0 as u32, bx1 as u32, by1 as u32)
}

/// Places motifs without overlap; `None` if a placement ran out of retries.
fn place_motifs(
    cfg: &GenConfig,
    kinds: &[MotifKind],
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(MotifKind, usize, usize, usize)>> {
    let mut placed: Vec<(MotifKind, usize, usize, usize)> = Vec::new();
    for &kind in kinds {
        let mut ok = false;
        for _ in 0..cfg.max_retries {
            let s = rng.random_range(cfg.motif_min..=cfg.motif_max);
            let x = rng.random_range(0..=cfg.image_size - s);
            let y = rng.random_range(0..=cfg.image_size - s);
            let cand = BoundingBox::new(x as u32, y as u32, (x + s) as u32, (y + s) as u32);
            let clash = placed.iter().any(|&(_, px, py, ps)| {
                let other =
                    BoundingBox::new(px as u32, py as u32, (px + ps) as u32, (py + ps) as u32);
                cand.intersects(&other, 2)
            });
            if !clash {
                placed.push((kind, x, y, s));
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

fn attempt(
    cfg: &GenConfig,
    vocab: &Vocabulary,
    index: u64,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<SyntheticSample>> {
    let size = cfg.image_size;
    let n_motifs = rng.random_range(cfg.min_motifs..=cfg.max_motifs);
    let mut kinds = MotifKind::ALL.to_vec();
    kinds.shuffle(rng);
    kinds.truncate(n_motifs);

    let Some(placements) = place_motifs(cfg, &kinds, rng) else {
        return Ok(None);
    };

    let noise =
        Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut img: Vec<f64> = (0..size * size)
        .map(|_| (cfg.background + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();

    let mut sentences: Vec<(String, Option<BoundingBox>, Option<MotifKind>)> = Vec::new();
    for &(kind, x, y, s) in &placements {
        let bbox = draw_motif(&mut img, size, kind, x, y, s, cfg.intensity, rng);
        let text = if rng.random_bool(cfg.location_prob) {
            let (v, h) = quadrant_words(&bbox, size);
            format!("there is a {} in the {v} {h}.", kind.word())
        } else {
            kind.prompt()
        };
        sentences.push((text, Some(bbox), Some(kind)));
    }
    let n_distract = rng.random_range(0..=cfg.max_distractors);
    let mut pool = DISTRACTORS.to_vec();
    pool.shuffle(rng);
    for d in pool.into_iter().take(n_distract) {
        sentences.push((d.to_string(), None, None));
    }
    sentences.shuffle(rng);

    let report = sentences
        .iter()
        .map(|(t, _, _)| t.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let tokens = vocab.tokenize(&report)?;
    debug_assert_eq!(tokens.num_sentences(), sentences.len());
    let image = img
        .iter()
        .map(|&p| ((p * 255.0).round() / 255.0) as f32)
        .collect();
    let class_label = kinds.iter().fold(0u32, |acc, k| acc | (1 << k.index()));
    Ok(Some(SyntheticSample {
        index,
        seed,
        size,
        image,
        report,
        tokens,
        boxes: sentences.iter().map(|s| s.1).collect(),
        sentence_kinds: sentences.iter().map(|s| s.2).collect(),
        class_label,
    }))
}

/// Generates sample `index` of the corpus keyed by `seed`. Placement failures
/// are retried with a fresh sub-stream; the number of retries is returned.
pub fn generate_sample(
    cfg: &GenConfig,
    vocab: &Vocabulary,
    seed: u64,
    index: u64,
) -> Result<(SyntheticSample, usize)> {
    let sample_seed = seeds::derive(seed, Stream::Sample, index);
    const MAX_REGENERATIONS: u64 = 1000;
    for regen in 0..MAX_REGENERATIONS {
        let mut rng = seeds::rng(sample_seed, Stream::Sample, regen);
        if let Some(s) = attempt(cfg, vocab, index, sample_seed, &mut rng)? {
            return Ok((s, regen as usize));
        }
    }
    Err(Error::invalid(format!(
        "could not place motifs for sample {index} after {MAX_REGENERATIONS} regenerations"
    )))
}

/// Deterministic per `(seed, index)`; samples are generated in parallel.
pub fn generate_corpus(n: usize, cfg: &GenConfig, seed: u64) -> Result<Vec<SyntheticSample>> {
    generate_range(0..n as u64, cfg, seed)
}

pub fn generate_range(
    range: std::ops::Range<u64>,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if range.is_empty() {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let out: Vec<(SyntheticSample, usize)> = range
        .into_par_iter()
        .map(|i| generate_sample(cfg, &vocab, seed, i))
        .collect::<Result<_>>()?;
    let regenerated: usize = out.iter().map(|(_, r)| *r).sum();
    if regenerated > 0 {
        log::info!("regenerated {regenerated} samples after motif placement failures");
    }
    Ok(out.into_iter().map(|(s, _)| s).collect())
}
