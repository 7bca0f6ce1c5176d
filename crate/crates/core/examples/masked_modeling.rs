//! Masked patch reconstruction and masked token prediction.

use candle_core::DType;
use qsvlm::data::{generate_corpus, GenConfig, Vocabulary};
use qsvlm::encoders::EncoderConfig;
use qsvlm::losses::modality::{image_recon_loss, mask_tokens, mlm_loss, ReconTargets};
use qsvlm::losses::{make_mask, modality_loss};
use qsvlm::nn::scalar;
use qsvlm::objective::TrainBatch;
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
    let corpus = generate_corpus(4, &gen, 2)?;
    let refs: Vec<_> = corpus.iter().collect();
    let batch = TrainBatch::new(&refs, &enc, DType::F32)?;

    let masks = (0..4).map(|i| make_mask(enc.num_patches(), 0.75, i)).collect::<qsvlm::Result<Vec<_>>>()?;
    println!("image 0 masked patches {:?}", masks[0].masked_indices);
    let mse = image_recon_loss(&model.vision, &model.decoder, &batch.images, &masks, ReconTargets::default())?;

    let tokens = mask_tokens(&batch.text, 0.15, enc.vocab_size, 3)?;
    let vocab = Vocabulary::standard();
    let shown: Vec<&str> = tokens.inputs.to_vec2::<u32>()?[0]
        .iter()
        .map(|&id| vocab.word(id).unwrap_or("?"))
        .collect();
    println!("masked report 0: {}", shown.join(" "));
    let mlm = mlm_loss(&model.text, &model.mlm_head, &batch.text, &tokens)?;
    println!(
        "mse {:.4}  mlm {:.4} (ln V = {:.4})  modality {:.4}",
        scalar(&mse)?,
        scalar(&mlm)?,
        (enc.vocab_size as f64).ln(),
        scalar(&modality_loss(&mse, &mlm)?)?
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
