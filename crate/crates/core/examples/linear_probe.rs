//! Linear probes on frozen image embeddings with 1%, 10% and 100% of the
//! labels.

use qsvlm::data::generate_corpus;
use qsvlm::eval::{linear_probe, EvalSuite, SuiteSizes, PROBE_FRACTIONS};

#[allow(dead_code)]
#[path = "pretrain.rs"]
mod pretrain;

pub fn run_example() -> qsvlm::Result<()> {
    let cfg = pretrain::small_config(40);
    let corpus = generate_corpus(300, &cfg.data, cfg.seed)?;
    let (ckpt, _) = qsvlm::train::train(&cfg, &corpus)?;
    let model = ckpt.to_model()?;
    let sizes = SuiteSizes {
        zero_shot: 0,
        grounding: 0,
        probe_pool: 800,
        probe_test: 200,
    };
    let suite = EvalSuite::generate(&cfg.data, 101, sizes)?;
    for fraction in PROBE_FRACTIONS {
        let r = linear_probe(&model, &suite.probe_pool, &suite.probe_test, fraction, 0)?;
        println!(
            "{:>5.1}% labels ({:>3} images): AUC {:.3}  accuracy {:.3}",
            fraction * 100.0,
            r.n_train,
            r.auc,
            r.accuracy
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
