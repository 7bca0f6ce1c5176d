//! Encode images and reports and compare their global embeddings.

use candle_core::DType;
use qsvlm::data::{generate_corpus, GenConfig};
use qsvlm::encoders::{cosine_sim, images_tensor, EncoderConfig, TextBatch};
use qsvlm::nn::rows_f64;
use qsvlm::Model;

pub fn run_example() -> qsvlm::Result<()> {
    let enc = EncoderConfig {
        image_size: 32,
        patch_size: 8,
        embed_dim: 16,
        heads: 2,
        depth: 1,
        ..EncoderConfig::default()
    };
    let model = Model::new(&enc, &Default::default(), 0, DType::F32)?;
    let gen = GenConfig {
        image_size: 32,
        motif_min: 6,
        motif_max: 10,
        ..GenConfig::default()
    };
    let samples = generate_corpus(3, &gen, 1)?;

    let pixels: Vec<&[f32]> = samples.iter().map(|s| s.image.as_slice()).collect();
    let vis = model.vision.forward(&images_tensor(&pixels, 32, DType::F32)?)?;
    let reports: Vec<_> = samples.iter().map(|s| &s.tokens).collect();
    let txt = model.text.forward(&TextBatch::new(&reports, &enc, DType::F32)?)?;
    println!("patch features {:?}, sentence slots {:?}", vis.patches.dims(), txt.sentences.dims());

    let v = rows_f64(&vis.global)?;
    let t = rows_f64(&txt.global)?;
    for (i, vi) in v.iter().enumerate() {
        let row: Vec<String> = t.iter().map(|tj| cosine_sim(vi, tj).map(|c| format!("{c:+.3}"))).collect::<qsvlm::Result<_>>()?;
        println!("image {i} vs reports: {}", row.join(" "));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
