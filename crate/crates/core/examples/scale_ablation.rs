//! The seven-row scale ablation at a toy budget.

use qsvlm::data::generate_corpus;
use qsvlm::eval::{run_ablation, EvalSuite, SuiteSizes};

#[allow(dead_code)]
#[path = "pretrain.rs"]
mod pretrain;

pub fn run_example() -> qsvlm::Result<()> {
    let cfg = pretrain::small_config(15);
    let corpus = generate_corpus(200, &cfg.data, cfg.seed)?;
    let sizes = SuiteSizes {
        zero_shot: 100,
        grounding: 0,
        probe_pool: 400,
        probe_test: 100,
    };
    let suite = EvalSuite::generate(&cfg.data, 102, sizes)?;
    let table = run_ablation(&cfg, &corpus, &suite)?;
    print!("{}", table.to_text());
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
