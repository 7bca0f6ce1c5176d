//! Hard-negative sampling and the matching head's binary loss.

use candle_core::DType;
use qsvlm::losses::{instance_matching_loss, sample_hard_negatives, MatchBatch, MatchHead};
use qsvlm::nn::{init_rng, l2_normalize, scalar, ParamBuilder, ParamStore};

pub fn run_example() -> qsvlm::Result<()> {
    let sim = vec![
        vec![5.0, 4.0, 0.0, 0.0],
        vec![4.0, 5.0, 0.0, 0.0],
        vec![0.0, 0.0, 5.0, 1.0],
        vec![0.0, 0.0, 1.0, 5.0],
    ];
    let mut counts = [[0usize; 4]; 4];
    for seed in 0..2000 {
        let (neg_text, _) = sample_hard_negatives(&sim, seed)?;
        for (i, &j) in neg_text.iter().enumerate() {
            counts[i][j] += 1;
        }
    }
    for (i, row) in counts.iter().enumerate() {
        println!("image {i}: negative report counts {row:?}");
    }

    let mut store = ParamStore::new(DType::F64);
    let mut rng = init_rng(0);
    let head = MatchHead::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("match"), 4)?;
    let emb = l2_normalize(&candle_core::Tensor::from_vec(
        sim.concat(),
        (4, 4),
        &candle_core::Device::Cpu,
    )?)?;
    let (neg_text, neg_image) = sample_hard_negatives(&sim, 0)?;
    let mb = MatchBatch::build(&emb, &emb, &neg_text, &neg_image, &head)?;
    println!("untrained matching loss {:.4}", scalar(&instance_matching_loss(&mb.probs, &mb.labels)?)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
