//! Every example runs to completion.

#[allow(dead_code)]
#[path = "../examples/synthetic_corpus.rs"]
mod synthetic_corpus;

#[test]
fn synthetic_corpus_runs() {
    synthetic_corpus::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/encode_pairs.rs"]
mod encode_pairs;

#[test]
fn encode_pairs_runs() {
    encode_pairs::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/global_alignment.rs"]
mod global_alignment;

#[test]
fn global_alignment_runs() {
    global_alignment::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/local_alignment.rs"]
mod local_alignment;

#[test]
fn local_alignment_runs() {
    local_alignment::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/instance_matching.rs"]
mod instance_matching;

#[test]
fn instance_matching_runs() {
    instance_matching::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/masked_modeling.rs"]
mod masked_modeling;

#[test]
fn masked_modeling_runs() {
    masked_modeling::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/pretrain.rs"]
mod pretrain;

#[test]
fn pretrain_runs() {
    pretrain::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/zero_shot.rs"]
mod zero_shot;

#[test]
fn zero_shot_runs() {
    zero_shot::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/grounding.rs"]
mod grounding;

#[test]
fn grounding_runs() {
    grounding::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/linear_probe.rs"]
mod linear_probe;

#[test]
fn linear_probe_runs() {
    linear_probe::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/scale_ablation.rs"]
mod scale_ablation;

#[test]
fn scale_ablation_runs() {
    scale_ablation::run_example().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/cli_pipeline.rs"]
mod cli_pipeline;

#[test]
fn cli_pipeline_runs() {
    cli_pipeline::run_example().unwrap();
}
