use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const PERIOD: u32 = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "."];

// Closed grammar: motif claims, locations and a handful of normal findings.
const WORDS: [&str; 31] = [
    "there",
    "is",
    "a",
    "in",
    "the",
    "upper",
    "lower",
    "left",
    "right",
    "blob",
    "ring",
    "bar",
    "cross",
    "background",
    "clear",
    "no",
    "other",
    "findings",
    "are",
    "seen",
    "image",
    "quality",
    "adequate",
    "field",
    "otherwise",
    "unremarkable",
    "noise",
    "level",
    "low",
    "study",
    "complete",
];

/// A report as token ids plus half-open sentence spans that partition `ids`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedReport {
    pub ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
}

impl TokenizedReport {
    pub fn num_sentences(&self) -> usize {
        self.spans.len()
    }

    pub fn sentence(&self, i: usize) -> &[u32] {
        let (s, e) = self.spans[i];
        &self.ids[s..e]
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<&'static str>,
    index: HashMap<&'static str, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let words: Vec<&'static str> = SPECIALS.iter().chain(WORDS.iter()).copied().collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (*w, i as u32))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Option<&'static str> {
        self.words.get(id as usize).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < PERIOD
    }

    /// Splits on whitespace, detaches periods, and closes a sentence at each
    /// period. A trailing run without a period forms a final sentence.
    pub fn tokenize(&self, text: &str) -> Result<TokenizedReport> {
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        let mut start = 0;
        for chunk in text.split_whitespace() {
            let (word, periods) = {
                let trimmed = chunk.trim_end_matches('.');
                (trimmed, chunk.len() - trimmed.len())
            };
            if !word.is_empty() {
                if word.starts_with('[') {
                    return Err(Error::OutOfVocabulary(word.to_string()));
                }
                ids.push(self.id(word)?);
            }
            for _ in 0..periods {
                ids.push(PERIOD);
                if ids.len() > start {
                    spans.push((start, ids.len()));
                }
                start = ids.len();
            }
        }
        if ids.len() > start {
            spans.push((start, ids.len()));
        }
        if ids.is_empty() {
            return Err(Error::invalid("empty report"));
        }
        Ok(TokenizedReport { ids, spans })
    }

    pub fn detokenize(&self, report: &TokenizedReport) -> Result<String> {
        let mut sentences = Vec::with_capacity(report.spans.len());
        for &(s, e) in &report.spans {
            let mut out = String::new();
            for &id in &report.ids[s..e] {
                let w = self
                    .word(id)
                    .ok_or_else(|| Error::invalid(format!("token id {id} out of range")))?;
                if id == PERIOD {
                    out.push('.');
                } else {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(w);
                }
            }
            sentences.push(out);
        }
        Ok(sentences.join(" "))
    }
}
