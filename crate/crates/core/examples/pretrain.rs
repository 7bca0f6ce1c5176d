//! Train with the four-term objective, checkpoint halfway and resume.

use qsvlm::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use qsvlm::data::{generate_corpus, GenConfig};
use qsvlm::train::Trainer;
use qsvlm::TrainConfig;

pub fn small_config(steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.steps = steps;
    cfg.batch_size = 16;
    cfg.model.image_size = 32;
    cfg.model.patch_size = 8;
    cfg.model.embed_dim = 32;
    cfg.model.depth = 1;
    cfg.masking.decoder_depth = 1;
    cfg.data = GenConfig {
        image_size: 32,
        motif_min: 6,
        motif_max: 10,
        ..GenConfig::default()
    };
    cfg
}

pub fn run_example() -> qsvlm::Result<()> {
    let cfg = small_config(40);
    let corpus = generate_corpus(200, &cfg.data, cfg.seed)?;

    let mut full = Trainer::new(cfg.clone())?;
    let log = full.run(&corpus, |r| {
        if r.step % 10 == 0 {
            println!(
                "step {:>3}  l_g {:.3}  l_l {:.3}  l_i {:.3}  l_m {:.3}  total {:.3}",
                r.step,
                r.l_g,
                r.l_l.unwrap_or(0.0),
                r.l_i.unwrap_or(0.0),
                r.l_m.unwrap_or(0.0),
                r.total
            );
        }
        Ok(())
    })?;
    println!("first total {:.3}, last total {:.3}", log[0].total, log[log.len() - 1].total);

    // stop at step 20, save, reload and finish
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("half.qsvlm");
    let mut half = Trainer::new(TrainConfig { steps: 20, ..cfg.clone() })?;
    half.run(&corpus, |_| Ok(()))?;
    save_checkpoint(&half.checkpoint()?, &path)?;
    let mut resumed = Trainer::from_checkpoint(&load_checkpoint(&path)?)?;
    resumed.set_total_steps(cfg.steps);
    resumed.run(&corpus, |_| Ok(()))?;
    let a = checkpoint_hash(&full.checkpoint()?)?;
    let b = checkpoint_hash(&resumed.checkpoint()?)?;
    println!("uninterrupted {}\nresumed       {}", &a[..16], &b[..16]);
    assert_eq!(a, b);
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
