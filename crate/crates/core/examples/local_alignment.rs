//! Sentence-to-patch attention and the local contrast built on it.

use candle_core::{Device, Tensor};
use qsvlm::losses::{local_alignment_loss, local_match, pairwise_z, TemperatureParams};
use qsvlm::nn::{l2_normalize, scalar};

pub fn run_example() -> qsvlm::Result<()> {
    let dev = Device::Cpu;
    let temps = TemperatureParams::default();
    // four patches: two carry feature "a", one "b", one is background
    let patches = Tensor::from_vec(vec![1.0f64, 0.0, 0.1, 0.9, 0.1, 0.1, 0.0, 1.0, 0.1, 0.1, 0.1, 1.0], (4, 3), &dev)?;
    let sentences = l2_normalize(&Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0], (2, 3), &dev)?)?;
    let m = local_match(&patches, &sentences, &temps)?;
    for (k, row) in m.attn.to_vec2::<f64>()?.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
        println!("sentence {k} attends to patches [{}]", cells.join(", "));
    }
    println!("Z = {:.4}", scalar(&m.z)?);

    // a batch of two pairs; the second report has one padded sentence slot
    let pb = Tensor::stack(&[patches.clone(), patches.flip_rows()?], 0)?;
    let sb = Tensor::stack(&[sentences.clone(), sentences.clone()], 0)?;
    let mask = Tensor::from_vec(vec![1.0f64, 1.0, 1.0, 0.0], (2, 2), &dev)?;
    println!("pairwise Z:\n{}", pairwise_z(&pb, &sb, &mask, &temps)?);
    println!("local loss {:.4}", scalar(&local_alignment_loss(&pb, &sb, &mask, &temps, true)?)?);
    Ok(())
}

trait FlipRows {
    fn flip_rows(&self) -> candle_core::Result<Tensor>;
}

impl FlipRows for Tensor {
    fn flip_rows(&self) -> candle_core::Result<Tensor> {
        let n = self.dim(0)?;
        let idx = Tensor::from_vec((0..n as u32).rev().collect::<Vec<_>>(), n, self.device())?;
        self.index_select(&idx, 0)
    }
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
