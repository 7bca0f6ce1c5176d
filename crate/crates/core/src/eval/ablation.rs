//! Trains every non-empty combination of the optional scales with the same
//! seed and budget and scores each on the held-out suite.

use serde::{Deserialize, Serialize};

use super::probe::linear_probe;
use super::zero_shot::{default_prompts, zero_shot_classify};
use super::EvalSuite;
use crate::config::{ScaleToggles, TrainConfig};
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::model::Model;

/// Label fraction of the probe column.
const PROBE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub scales: ScaleToggles,
    /// Probe AUC with 1% of the labels.
    pub probe_auc: Option<f64>,
    pub zero_shot_auc: Option<f64>,
    pub zero_shot_accuracy: Option<f64>,
    pub error: Option<String>,
}

impl AblationRow {
    fn failed(scales: ScaleToggles, e: &Error) -> Self {
        Self {
            label: scales.label(),
            scales,
            probe_auc: None,
            zero_shot_auc: None,
            zero_shot_accuracy: None,
            error: Some(e.to_string()),
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// Seeds the rows were trained with; one for a single table, several for
    /// an aggregate.
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub rows: Vec<AblationRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

impl AblationTable {
    pub fn row(&self, scales: ScaleToggles) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.scales == scales)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let header = ["scales", "probe_auc@1%", "zeroshot_auc", "zeroshot_acc", "status"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    cell(r.probe_auc),
                    cell(r.zero_shot_auc),
                    cell(r.zero_shot_accuracy),
                    r.error.as_ref().map_or("ok".to_string(), |e| format!("FAILED: {e}")),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# seeds {} | steps {}\n", seeds.join(","), self.steps);
        out.push_str(&line(&header.map(String::from)));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    /// Row-wise mean over tables with identical row order. A cell is averaged
    /// over the seeds where it succeeded; a row failing in every seed keeps
    /// the first error.
    pub fn mean(tables: &[AblationTable]) -> Result<AblationTable> {
        let first = tables.first().ok_or_else(|| Error::invalid("no ablation tables to aggregate"))?;
        let mut rows = Vec::with_capacity(first.rows.len());
        for (i, r0) in first.rows.iter().enumerate() {
            let column: Vec<&AblationRow> = tables
                .iter()
                .map(|t| {
                    t.rows
                        .get(i)
                        .filter(|r| r.scales == r0.scales)
                        .ok_or_else(|| Error::invalid("ablation tables have different rows"))
                })
                .collect::<Result<_>>()?;
            let avg = |f: fn(&AblationRow) -> Option<f64>| {
                let v: Vec<f64> = column.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let ok = column.iter().any(|r| r.ok());
            rows.push(AblationRow {
                label: r0.label.clone(),
                scales: r0.scales,
                probe_auc: avg(|r| r.probe_auc),
                zero_shot_auc: avg(|r| r.zero_shot_auc),
                zero_shot_accuracy: avg(|r| r.zero_shot_accuracy),
                error: if ok { None } else { r0.error.clone() },
            });
        }
        Ok(AblationTable {
            seeds: tables.iter().flat_map(|t| t.seeds.clone()).collect(),
            steps: first.steps,
            rows,
        })
    }
}

/// Scores one trained model on the suite.
fn score_row(model: &Model, scales: ScaleToggles, suite: &EvalSuite, seed: u64) -> Result<AblationRow> {
    let zs = zero_shot_classify(model, &suite.zero_shot, &default_prompts())?;
    let probe = linear_probe(model, &suite.probe_pool, &suite.probe_test, PROBE_FRACTION, seed)?;
    Ok(AblationRow {
        label: scales.label(),
        scales,
        probe_auc: Some(probe.auc),
        zero_shot_auc: Some(zs.auc),
        zero_shot_accuracy: Some(zs.accuracy),
        error: None,
    })
}

/// Like [`run_ablation`] with a caller-supplied training routine.
pub fn run_ablation_with<F>(base: &TrainConfig, suite: &EvalSuite, mut train_row: F) -> Result<AblationTable>
where
    F: FnMut(&TrainConfig) -> Result<Model>,
{
    base.validate()?;
    let mut rows = Vec::new();
    for scales in ScaleToggles::ablation_rows() {
        let cfg = TrainConfig {
            scales,
            ..base.clone()
        };
        let row = train_row(&cfg).and_then(|m| score_row(&m, scales, suite, base.seed));
        rows.push(match row {
            Ok(r) => r,
            Err(e) => {
                log::warn!("ablation row {} failed: {e}", scales.label());
                AblationRow::failed(scales, &e)
            }
        });
    }
    Ok(AblationTable {
        seeds: vec![base.seed],
        steps: base.steps,
        rows,
    })
}

/// The seven-row scale ablation. A failing row is kept with its error.
pub fn run_ablation(base: &TrainConfig, dataset: &[SyntheticSample], suite: &EvalSuite) -> Result<AblationTable> {
    run_ablation_with(base, suite, |cfg| {
        let (ckpt, _) = crate::train::train(cfg, dataset)?;
        ckpt.to_model()
    })
}
