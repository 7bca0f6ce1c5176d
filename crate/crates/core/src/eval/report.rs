use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::MotifKind;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub scores: BTreeMap<String, f64>,
}

/// One evaluation run. `aggregate` values are plain means: over classes for
/// AUC, over items for IoU and CNR, over images for accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub seed: u64,
    pub items: usize,
    pub per_class: Vec<ClassScore>,
    pub aggregate: BTreeMap<String, f64>,
    /// Protocol choices the reader should know about.
    pub notes: Vec<String>,
    pub config: Option<TrainConfig>,
}

impl MetricsReport {
    pub fn new(task: &str, seed: u64, config: Option<TrainConfig>) -> Self {
        Self {
            task: task.to_string(),
            seed,
            items: 0,
            per_class: Vec::new(),
            aggregate: BTreeMap::new(),
            notes: Vec::new(),
            config,
        }
    }

    /// Adds per-class AUCs named after the motif kinds.
    pub fn with_class_auc(mut self, key: &str, per_class: &[Option<f64>]) -> Self {
        for (kind, auc) in MotifKind::ALL.iter().zip(per_class) {
            let entry = match self.per_class.iter_mut().position(|c| c.class == kind.word()) {
                Some(i) => &mut self.per_class[i],
                None => {
                    self.per_class.push(ClassScore {
                        class: kind.word().to_string(),
                        scores: BTreeMap::new(),
                    });
                    self.per_class.last_mut().unwrap()
                }
            };
            if let Some(a) = auc {
                entry.scores.insert(key.to_string(), *a);
            }
        }
        self
    }

    pub fn set(&mut self, key: &str, value: f64) {
        self.aggregate.insert(key.to_string(), value);
    }

    pub fn note(&mut self, text: &str) {
        self.notes.push(text.to_string());
    }

    /// Single-line JSON record.
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
