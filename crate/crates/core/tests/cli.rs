//! The `qsvlm` subcommands, driven in-process.

mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use qsvlm::cli::{self, EXIT_OK, EXIT_USAGE};
use qsvlm::data::{corpus_hash, ANNOTATIONS, IMAGES_DIR};
use qsvlm::eval::{AblationTable, MetricsReport};
use sha2::{Digest, Sha256};

fn run(args: &[&str]) -> i32 {
    cli::run_from(std::iter::once("qsvlm").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    root: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(steps: u64) -> Self {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(3);
        cfg.steps = steps;
        let config = root.path().join("tiny.toml");
        fs::write(&config, cfg.to_toml_string().unwrap()).unwrap();
        Self { root, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn gen(&self, name: &str, n: usize, single: bool) -> PathBuf {
        let out = self.path(name);
        let n = n.to_string();
        let mut args = vec!["gen", "--n", &n, "--seed", "9", "--config", s(&self.config), "--out", s(&out)];
        if single {
            args.push("--single-motif");
        }
        assert_eq!(run(&args), EXIT_OK);
        out
    }

    fn pretrain(&self, data: &Path, name: &str) -> PathBuf {
        let out = self.path(name);
        assert_eq!(run(&["pretrain", "--config", s(&self.config), "--data", s(data), "--out", s(&out)]), EXIT_OK);
        out
    }
}

fn reports(dir: &Path) -> Vec<MetricsReport> {
    fs::read_to_string(dir.join(cli::REPORT_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_writes_images_and_records_reproducibly() {
    let fx = Fixture::new(2);
    let a = fx.gen("a", 10, false);
    assert_eq!(fs::read_dir(a.join(IMAGES_DIR)).unwrap().count(), 10);
    assert_eq!(fs::read_to_string(a.join(ANNOTATIONS)).unwrap().lines().count(), 10);
    let b = fx.gen("b", 10, false);
    assert_eq!(corpus_hash(&a).unwrap(), corpus_hash(&b).unwrap());
    let m = cli::read_manifest(&a).unwrap();
    assert_eq!(m.command, "gen");
    assert_eq!(m.corpus_hash.unwrap(), corpus_hash(&a).unwrap());
    assert!(m.finished_at.is_some());
    // the manifest hash is the hash of the config copy
    let copy = fs::read(a.join(cli::CONFIG_COPY)).unwrap();
    assert_eq!(m.config_hash, hex::encode(Sha256::digest(&copy)));
}

#[test]
fn usage_errors_exit_with_code_2() {
    let fx = Fixture::new(2);
    let out = fx.path("zero");
    assert_eq!(run(&["gen", "--n", "0", "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(run(&["gen", "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    let a = fx.gen("a", 4, false);
    // non-empty output directory without --force
    assert_eq!(run(&["gen", "--n", "4", "--out", s(&a)]), EXIT_USAGE);
    assert_eq!(run(&["gen", "--n", "4", "--config", s(&fx.config), "--out", s(&a), "--force"]), EXIT_OK);
    assert_eq!(run(&["pretrain", "--data", s(&fx.path("missing")), "--out", s(&fx.path("p"))]), EXIT_USAGE);
    // a 64px default model cannot read 16px images
    assert_eq!(run(&["pretrain", "--data", s(&a), "--out", s(&fx.path("p2"))]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn pretrain_logs_every_step_and_resumes() {
    let fx = Fixture::new(0);
    let data = fx.gen("data", 12, false);
    // zero steps: the checkpoint is the initialization
    let init = fx.pretrain(&data, "init");
    let ckpt = cli::pretrain_checkpoint(&init).unwrap();
    assert_eq!(ckpt.step, 0);
    let fresh = qsvlm::train::Trainer::new(ckpt.config.clone()).unwrap().checkpoint().unwrap();
    assert_eq!(ckpt, fresh);
    assert_eq!(fs::read_to_string(init.join(cli::METRICS_FILE)).unwrap(), "");

    let mut cfg = tiny_config(3);
    cfg.steps = 5;
    fs::write(&fx.config, cfg.to_toml_string().unwrap()).unwrap();
    let full = fx.pretrain(&data, "full");
    let lines: Vec<serde_json::Value> = fs::read_to_string(full.join(cli::METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i as u64 + 1);
        for key in ["l_g", "l_l", "l_i", "l_m", "total", "wall_ms"] {
            assert!(l.get(key).is_some(), "{key}");
        }
    }

    // 2 steps, then resume to 5
    cfg.steps = 2;
    fs::write(&fx.config, cfg.to_toml_string().unwrap()).unwrap();
    let part = fx.pretrain(&data, "part");
    cfg.steps = 5;
    fs::write(&fx.config, cfg.to_toml_string().unwrap()).unwrap();
    let rest = fx.path("rest");
    let resume = part.join(cli::CHECKPOINT_FILE);
    assert_eq!(
        run(&["pretrain", "--config", s(&fx.config), "--data", s(&data), "--resume", s(&resume), "--out", s(&rest)]),
        EXIT_OK
    );
    assert_eq!(cli::pretrain_checkpoint(&rest).unwrap(), cli::pretrain_checkpoint(&full).unwrap());

    // a resume config that differs beyond `steps` is refused
    cfg.optim.lr *= 2.0;
    fs::write(&fx.config, cfg.to_toml_string().unwrap()).unwrap();
    let bad = fx.path("bad");
    assert_eq!(
        run(&["pretrain", "--config", s(&fx.config), "--data", s(&data), "--resume", s(&resume), "--out", s(&bad)]),
        EXIT_USAGE
    );
}

#[test]
fn eval_tasks_write_reports() {
    let fx = Fixture::new(2);
    let data = fx.gen("data", 8, false);
    let trained = fx.pretrain(&data, "train");
    let ckpt = trained.join(cli::CHECKPOINT_FILE);

    let single = fx.gen("single", 60, true);
    let zs = fx.path("zs");
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&single), "--task", "zeroshot", "--out", s(&zs)]), EXIT_OK);
    let r = &reports(&zs)[0];
    assert_eq!(r.items, 60);
    assert!((0.0..=1.0).contains(&r.aggregate["accuracy"]));

    let g = fx.path("g");
    assert_eq!(
        run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--task", "ground", "--limit", "1", "--out", s(&g)]),
        EXIT_OK
    );
    assert_eq!(fs::read_dir(g.join(cli::OVERLAY_DIR)).unwrap().count(), 1);
    let r = &reports(&g)[0];
    assert_eq!(r.items, 1);
    assert!(r.aggregate.contains_key("miou") && r.aggregate.contains_key("cnr"));

    let pool = fx.gen("pool", 600, true);
    let p = fx.path("p");
    assert_eq!(run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&pool), "--task", "probe", "--out", s(&p)]), EXIT_OK);
    let rs = reports(&p);
    assert_eq!(rs.len(), 3);
    let fractions: Vec<f64> = rs.iter().map(|r| r.aggregate["fraction"]).collect();
    assert_eq!(fractions, vec![0.01, 0.1, 1.0]);
    assert!(rs.iter().all(|r| r.aggregate.contains_key("auc")));

    assert_eq!(
        run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&single), "--task", "zeroshot", "--limit", "0", "--out", s(&fx.path("z0"))]),
        EXIT_USAGE
    );
}

#[test]
fn ablate_tables_are_reproducible_and_aggregate_by_mean() {
    let fx = Fixture::new(2);
    let data = fx.gen("data", 8, false);
    let ablate = |name: &str, seeds: &str| {
        let out = fx.path(name);
        let args = ["ablate", "--config", s(&fx.config), "--data", s(&data), "--seeds", seeds, "--eval-size", "200", "--out", s(&out)];
        assert_eq!(run(&args), EXIT_OK);
        out
    };
    let one = ablate("one", "1");
    let table: AblationTable = serde_json::from_slice(&fs::read(one.join("table_seed3.json")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 7);
    assert_eq!(table.failures(), 0);
    let again = ablate("again", "1");
    assert_eq!(
        fs::read_to_string(one.join("table_seed3.txt")).unwrap(),
        fs::read_to_string(again.join("table_seed3.txt")).unwrap()
    );

    let three = ablate("three", "3");
    let tables: Vec<AblationTable> = (3..6)
        .map(|k| serde_json::from_slice(&fs::read(three.join(format!("table_seed{k}.json"))).unwrap()).unwrap())
        .collect();
    let agg: AblationTable = serde_json::from_slice(&fs::read(three.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg.seeds, vec![3, 4, 5]);
    for (i, row) in agg.rows.iter().enumerate() {
        let mean = tables.iter().map(|t| t.rows[i].zero_shot_auc.unwrap()).sum::<f64>() / 3.0;
        assert!((row.zero_shot_auc.unwrap() - mean).abs() < 1e-12);
    }
}
