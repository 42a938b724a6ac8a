#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_CONFIG: &str = r#"{
  "corpus": {"subjects": 3, "sentences_per_level": 1, "neutral_sentences": 1,
             "min_frames": 50, "max_frames": 50, "feature_dim": 8, "split": [0.34, 0.33, 0.33]},
  "blendshape": {"vertices": 60},
  "vqvae": {"channels": 8, "codes": 16, "heads": 2, "blocks": 1},
  "encoder": {"feature_dim": 8, "d_id": 8, "id_hidden": 16,
              "hifb": {"layers": 1, "heads": 2, "d": 8, "n_f": 2}},
  "stage1": {"batch_size": 4, "max_steps": 6},
  "stage2": {"batch_size": 4, "max_steps": 6},
  "ablation": {"seeds": [0],
               "sie": {"feature_dim": 8, "d_id": 8, "id_hidden": 16,
                       "hifb": {"layers": 1, "heads": 2, "d": 8, "n_f": 2}},
               "train": {"batch_size": 4, "max_steps": 4}, "max_test_items": 2}
}"#;

pub fn lsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsf"))
        .args(args)
        .env("LSF_THREADS", "1")
        .output()
        .expect("spawn lsf")
}

/// Runs `lsf` and panics with its stderr unless it exits 0.
pub fn lsf_ok(args: &[&str]) -> Output {
    let out = lsf(args);
    assert!(
        out.status.success(),
        "lsf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Small corpus plus both training stages under `dir`.
pub struct Prepared {
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub stage1: PathBuf,
    pub stage2: PathBuf,
}

pub fn write_config(dir: &Path) -> PathBuf {
    let config = dir.join("config.json");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    config
}

pub fn prepare(dir: &Path) -> Prepared {
    let config = write_config(dir);
    let corpus = dir.join("corpus");
    lsf_ok(&["synth-corpus", "--config", s(&config), "--out", s(&corpus)]);
    let s1 = dir.join("stage1");
    lsf_ok(&["train-vqvae", "--config", s(&config), "--corpus", s(&corpus), "--out", s(&s1)]);
    let s2 = dir.join("stage2");
    let ck1 = s1.join("checkpoint.lsfc");
    lsf_ok(&[
        "train-encoder",
        "--config",
        s(&config),
        "--corpus",
        s(&corpus),
        "--vqvae",
        s(&ck1),
        "--out",
        s(&s2),
    ]);
    Prepared {
        config,
        corpus,
        stage1: ck1,
        stage2: s2.join("checkpoint.lsfc"),
    }
}

pub fn test_item(p: &Prepared) -> String {
    let corpus = lsf_core::corpus::Corpus::read(&p.corpus).unwrap();
    let ids = corpus.split.ids(lsf_core::corpus::SplitName::Test);
    corpus
        .items
        .iter()
        .find(|it| ids.contains(&it.subject) && it.emotion != 0)
        .expect("test item")
        .key
        .clone()
}

pub fn generate(p: &Prepared, item: &str, samples: usize, temp: f64, seed: u64, out: &Path) -> Output {
    lsf(&[
        "generate",
        "--config",
        s(&p.config),
        "--corpus",
        s(&p.corpus),
        "--ckpt",
        s(&p.stage2),
        "--item",
        item,
        "--samples",
        &samples.to_string(),
        "--temp",
        &temp.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(out),
    ])
}

/// Every file under `dir`, relative path and bytes, sorted by path.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
