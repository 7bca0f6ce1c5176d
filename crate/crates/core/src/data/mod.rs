//! Synthetic paired image/report corpus with sentence-level grounding boxes.

mod generate;
mod io;
mod vocab;

pub use generate::{
    generate_corpus, generate_range, generate_sample, BoundingBox, GenConfig, MotifKind,
    SyntheticSample,
};
pub use io::{corpus_hash, read_corpus, write_corpus, AnnotationRecord, ANNOTATIONS, IMAGES_DIR};
pub use vocab::{TokenizedReport, Vocabulary, CLS, MASK, PAD, PERIOD, SEP};
