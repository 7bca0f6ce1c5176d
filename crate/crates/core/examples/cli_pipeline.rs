//! The `qsvlm` command line end to end: gen, pretrain, eval.

use qsvlm::cli;

#[allow(dead_code)]
#[path = "pretrain.rs"]
mod pretrain;

fn qsvlm(args: &[&str]) -> qsvlm::Result<()> {
    println!("$ qsvlm {}", args.join(" "));
    match cli::run_from(std::iter::once("qsvlm").chain(args.iter().copied())) {
        0 => Ok(()),
        code => Err(qsvlm::Error::InvalidInput(format!("exit code {code}"))),
    }
}

pub fn run_example() -> qsvlm::Result<()> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    std::fs::write(p("small.toml"), pretrain::small_config(20).to_toml_string()?)?;

    qsvlm(&["gen", "--n", "100", "--seed", "1", "--config", &p("small.toml"), "--out", &p("train")])?;
    qsvlm(&["gen", "--n", "60", "--seed", "2", "--config", &p("small.toml"), "--single-motif", "--out", &p("held")])?;
    qsvlm(&["pretrain", "--config", &p("small.toml"), "--data", &p("train"), "--out", &p("run")])?;
    let ckpt = format!("{}/{}", p("run"), cli::CHECKPOINT_FILE);
    qsvlm(&["eval", "--checkpoint", &ckpt, "--data", &p("held"), "--task", "zeroshot", "--out", &p("zs")])?;
    qsvlm(&["eval", "--checkpoint", &ckpt, "--data", &p("train"), "--task", "ground", "--limit", "5", "--out", &p("ground")])?;

    for out in ["zs", "ground"] {
        print!("{out}: {}", std::fs::read_to_string(format!("{}/{}", p(out), cli::REPORT_FILE))?);
    }
    let m = cli::read_manifest(std::path::Path::new(&p("run")))?;
    println!("pretrain manifest: seed {} config {}", m.seed, &m.config_hash[..16]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> qsvlm::Result<()> {
    run_example()
}
