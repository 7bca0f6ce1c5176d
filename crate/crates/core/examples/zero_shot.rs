//! Zero-shot motif classification with text prompts, before and after a
//! short training run. The toy budget shows the API; real accuracy needs the
//! default config and several hundred steps.

use candle_core::DType;
use qsvlm::data::generate_corpus;
use qsvlm::eval::{default_prompts, zero_shot_classify, EvalSuite, SuiteSizes};
use qsvlm::Model;

#[allow(dead_code)]
#[path = "pretrain.rs"]
mod pretrain;

pub fn run_example() -> qsvlm::Result<()> {
    let cfg = pretrain::small_config(60);
    let corpus = generate_corpus(300, &cfg.data, cfg.seed)?;
    let sizes = SuiteSizes {
        zero_shot: 200,
        grounding: 0,
        probe_pool: 0,
        probe_test: 0,
    };
    let suite = EvalSuite::generate(&cfg.data, 100, sizes)?;
    println!("prompts: {:?}", default_prompts());

    let untrained = Model::from_config(&cfg, DType::F32)?;
    let before = zero_shot_classify(&untrained, &suite.zero_shot, &default_prompts())?;
    let (ckpt, _) = qsvlm::train::train(&cfg, &corpus)?;
    let after = zero_shot_classify(&ckpt.to_model()?, &suite.zero_shot, &default_prompts())?;
    println!("untrained: accuracy {:.3}  macro AUC {:.3}", before.accuracy, before.auc);
    println!("trained:   accuracy {:.3}  macro AUC {:.3}", after.accuracy, after.auc);
    println!("per-class AUC {:?}", after.per_class_auc);
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
