#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng as _;
use serde_json::json;

use dialoglab::numerics::rng::rng_for;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dialoglab"));
    c.env_remove("DIALOGLAB_SEED");
    c
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Writes a tagged toy corpus of `n` dialogs in the JSON-lines format.
pub fn write_corpus(path: &Path, n: usize, seed: u64) {
    let mut rng = rng_for(seed, "cli-corpus");
    let mut lines = Vec::new();
    for _ in 0..n {
        let turns = rng.random_range(1..=3);
        let mut utts = Vec::new();
        let mut tags = Vec::new();
        for _ in 0..=turns {
            let len = rng.random_range(1..=4);
            let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..12))).collect();
            let t: Vec<&str> = (0..len).map(|_| ["N", "V", "O"][rng.random_range(0..3)]).collect();
            utts.push(words.join(" "));
            tags.push(t);
        }
        let response = utts.pop().unwrap();
        lines.push(json!({"context": utts, "response": response, "pos": tags}).to_string());
    }
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

/// Tiny, fast configuration over `train.jsonl` / `test.jsonl` in `dir`.
pub fn write_toy_setup(dir: &Path) -> PathBuf {
    write_corpus(&dir.join("train.jsonl"), 24, 1);
    write_corpus(&dir.join("test.jsonl"), 6, 2);
    let cfg = dir.join("toy.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# toy run\nhidden = 8\nembed = 6\nheads = 2\ntransformer_layers = 1\nlatent_dim = 4\n\
             epochs = 2\nlr = 1e-3\nmax_decode_len = 4\nembedding_dim = 8\nscorer_epochs = 3\n\
             train_corpus = {}\ntest_corpus = {}\n",
            dir.join("train.jsonl").display(),
            dir.join("test.jsonl").display()
        ),
    )
    .unwrap();
    cfg
}

pub fn train_toy(cfg: &Path, out: &Path, arch: &str) -> PathBuf {
    run_ok(bin().args(["train", "--config"]).arg(cfg).args(["--arch", arch, "--out"]).arg(out));
    out.join(arch).join("best.ckpt")
}
