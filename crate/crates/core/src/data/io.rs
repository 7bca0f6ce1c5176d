//! On-disk corpus layout:
//!
//! ```text
//! <dir>/images/000000.png     8-bit grayscale, lossless
//! <dir>/annotations.jsonl     one record per sample, in index order
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{BoundingBox, MotifKind, SyntheticSample};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub index: u64,
    pub seed: u64,
    pub image: String,
    pub size: usize,
    pub report: String,
    pub boxes: Vec<Option<[u32; 4]>>,
    pub sentence_kinds: Vec<Option<MotifKind>>,
    pub class_label: u32,
}

fn image_name(index: u64) -> String {
    format!("{IMAGES_DIR}/{index:06}.png")
}

pub fn write_corpus(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let mut ann = BufWriter::new(fs::File::create(dir.join(ANNOTATIONS))?);
    for s in samples {
        let mut img = GrayImage::new(s.size as u32, s.size as u32);
        for (i, p) in s.image.iter().enumerate() {
            let v = (p * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel((i % s.size) as u32, (i / s.size) as u32, Luma([v]));
        }
        let name = image_name(s.index);
        img.save(dir.join(&name))?;
        let rec = AnnotationRecord {
            index: s.index,
            seed: s.seed,
            image: name,
            size: s.size,
            report: s.report.clone(),
            boxes: s
                .boxes
                .iter()
                .map(|b| b.map(|b| [b.x0, b.y0, b.x1, b.y1]))
                .collect(),
            sentence_kinds: s.sentence_kinds.clone(),
            class_label: s.class_label,
        };
        serde_json::to_writer(&mut ann, &rec)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Vec<SyntheticSample>> {
    let vocab = Vocabulary::standard();
    let path = dir.join(ANNOTATIONS);
    let file = fs::File::open(&path).map_err(|e| {
        Error::invalid(format!("cannot open corpus at {}: {e}", path.display()))
    })?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let img = image::open(dir.join(&rec.image))?.to_luma8();
        if img.width() as usize != rec.size || img.height() as usize != rec.size {
            return Err(Error::shape(
                "corpus image",
                format!("{0}x{0}", rec.size),
                format!("{}x{}", img.width(), img.height()),
            ));
        }
        let image = img
            .pixels()
            .map(|p| (p.0[0] as f64 / 255.0) as f32)
            .collect();
        let tokens = vocab.tokenize(&rec.report)?;
        if tokens.num_sentences() != rec.boxes.len()
            || rec.boxes.len() != rec.sentence_kinds.len()
        {
            return Err(Error::invalid(format!(
                "sample {}: {} sentences but {} boxes",
                rec.index,
                tokens.num_sentences(),
                rec.boxes.len()
            )));
        }
        out.push(SyntheticSample {
            index: rec.index,
            seed: rec.seed,
            size: rec.size,
            image,
            report: rec.report,
            tokens,
            boxes: rec
                .boxes
                .iter()
                .map(|b| b.map(|[x0, y0, x1, y1]| BoundingBox::new(x0, y0, x1, y1)))
                .collect(),
            sentence_kinds: rec.sentence_kinds,
            class_label: rec.class_label,
        });
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("corpus at {} is empty", dir.display())));
    }
    Ok(out)
}

/// SHA-256 over the annotation file and every image, in index order.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let ann = fs::read(dir.join(ANNOTATIONS))?;
    h.update(&ann);
    for line in ann.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
        let rec: AnnotationRecord = serde_json::from_slice(line)?;
        h.update(rec.image.as_bytes());
        h.update(fs::read(dir.join(&rec.image))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GenConfig};

    #[test]
    fn write_then_read_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(6, &GenConfig::default(), 21).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back, corpus);
        let h1 = corpus_hash(dir.path()).unwrap();
        assert_eq!(h1, corpus_hash(dir.path()).unwrap());
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn missing_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_corpus(dir.path()).is_err());
    }
}
