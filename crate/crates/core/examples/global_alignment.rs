//! Global image-report contrast on hand-built embeddings.

use candle_core::{Device, Tensor};
use qsvlm::losses::global_alignment_loss;
use qsvlm::nn::{l2_normalize, scalar};

pub fn run_example() -> qsvlm::Result<()> {
    let dev = Device::Cpu;
    let v = l2_normalize(&Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 1.0, 0.7, 0.7], (3, 2), &dev)?)?;
    // matched reports point the same way as their images
    let matched = v.clone();
    // shuffled reports
    let shuffled = Tensor::cat(&[v.narrow(0, 1, 2)?, v.narrow(0, 0, 1)?], 0)?;
    for tau in [0.5, 0.1, 0.05] {
        let good = scalar(&global_alignment_loss(&v, &matched, tau, true)?)?;
        let bad = scalar(&global_alignment_loss(&v, &shuffled, tau, true)?)?;
        println!("tau {tau}: aligned {good:.4}  shuffled {bad:.4}");
    }
    // identical embeddings leave the loss at ln B
    let same = Tensor::ones((4, 2), candle_core::DType::F64, &dev)?;
    let flat = scalar(&global_alignment_loss(&l2_normalize(&same)?, &l2_normalize(&same)?, 0.07, true)?)?;
    println!("uniform batch of 4: {flat:.6} (ln 4 = {:.6})", 4f64.ln());
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
