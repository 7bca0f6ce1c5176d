//! Phrase grounding: sentence-patch heatmaps, thresholded regions, IoU and
//! CNR, and a PNG overlay.

use qsvlm::data::generate_corpus;
use qsvlm::eval::{ground_samples, miou, write_overlay, GroundingOptions, HeatmapMode};

#[allow(dead_code)]
#[path = "pretrain.rs"]
mod pretrain;

pub fn run_example() -> qsvlm::Result<()> {
    let cfg = pretrain::small_config(60);
    let corpus = generate_corpus(300, &cfg.data, cfg.seed)?;
    let (ckpt, _) = qsvlm::train::train(&cfg, &corpus)?;
    let model = ckpt.to_model()?;
    let held_out = generate_corpus(20, &cfg.data, 500)?;

    for mode in [HeatmapMode::Cosine, HeatmapMode::Attention] {
        let opts = GroundingOptions {
            mode,
            ..GroundingOptions::default()
        };
        let results = ground_samples(&model, &held_out, &opts, None)?;
        let ious: Vec<f64> = results.iter().map(|r| r.iou).collect();
        let cnr = results.iter().map(|r| r.cnr).sum::<f64>() / results.len() as f64;
        println!("{mode:?}: {} queries, mIoU {:.3}, mean CNR {:.3}", results.len(), miou(&ious)?, cnr);
    }

    let results = ground_samples(&model, &held_out, &GroundingOptions::default(), Some(1))?;
    let r = &results[0];
    println!("\"{}\" target {:?} predicted {:?}", r.sentence, r.target, r.region.bbox);
    for row in r.heatmap.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:+.2}")).collect();
        println!("  {}", cells.join(" "));
    }
    let dir = tempfile::tempdir()?;
    let sample = held_out.iter().find(|s| s.index == r.sample).expect("grounded sample");
    println!("overlay written to {}", write_overlay(dir.path(), sample, r)?.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
