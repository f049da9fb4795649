#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Two small synthetic domains and a model small enough for a few seconds of training.
pub const TINY_CONFIG: &str = r#"
seed = 5

[[data.synthetic]]
name = "left"
classes = ["sine", "square"]
freq_range = [2.5, 3.5]
noise = 0.1
length = 32
channels = 1
patch_size = 4
codebook_size = 8
train_per_class = 10
test_per_class = 4

[[data.synthetic]]
name = "right"
classes = ["sawtooth", "sine"]
freq_range = [2.5, 3.5]
noise = 0.1
length = 32
channels = 2
patch_size = 4
codebook_size = 8
train_per_class = 10
test_per_class = 4
with_context = true

[tokenizer]
d_code = 4
hidden = 6
kernel_size = 2
dilations = [1, 2]
epochs = 2
batch_size = 8

[model]
d_model = 8
n_layers = 1
n_heads = 2
context_window = 96
dropout = 0.1
projector_hidden = [4, 8]

[pretrain]
learning_rate = 3e-3
batch_size = 8
epochs = 1

[finetune]
learning_rate = 3e-3
batch_size = 8
epochs = 1

[eval]
max_new_tokens = 6
embedding_samples = 4

[grid]
codebook_sizes = [8]
fractions = [0.5, 1.0]
"#;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    /// Run directory announced on the last stdout line.
    pub fn dir(&self) -> PathBuf {
        let line = self
            .stdout
            .lines()
            .rev()
            .find_map(|l| l.split_once(": wrote ").map(|(_, d)| d.to_string()))
            .unwrap_or_else(|| panic!("no run directory in output:\n{}\n{}", self.stdout, self.stderr));
        PathBuf::from(line)
    }
}

pub fn tsgen(args: &[&str], out: &Path) -> Run {
    let output: Output = Command::new(env!("CARGO_BIN_EXE_tsgen"))
        .args(args)
        .env("INSTRUCTTIME_OUT", out)
        .output()
        .expect("binary runs");
    Run {
        code: output.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

/// Run and require success.
pub fn ok(args: &[&str], out: &Path) -> PathBuf {
    let r = tsgen(args, out);
    assert_eq!(r.code, 0, "tsgen {args:?} failed:\n{}\n{}", r.stdout, r.stderr);
    r.dir()
}

/// Every file under `dir` except the echoed config, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                if rel != "config.toml" {
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
    }
    out
}

/// Outputs of a full pipeline chain on the tiny config, one entry per verb.
pub struct Chain {
    pub data: PathBuf,
    pub tokenizers: PathBuf,
    pub pretrain: PathBuf,
    pub finetune: PathBuf,
    pub evaluate: PathBuf,
    pub grid: PathBuf,
    pub stats: PathBuf,
    pub embeddings: PathBuf,
    pub dump: PathBuf,
}

impl Chain {
    pub fn dirs(&self) -> Vec<(&'static str, &Path)> {
        vec![
            ("gen-data", &self.data),
            ("train-tokenizer", &self.tokenizers),
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
            ("evaluate", &self.evaluate),
            ("grid", &self.grid),
            ("stats", &self.stats),
            ("export-embeddings", &self.embeddings),
            ("dump-prompt", &self.dump),
        ]
    }
}

pub fn run_chain(config: &Path, out: &Path, seed: &str) -> Chain {
    let c = config.to_str().unwrap();
    let base = ["--config", c, "--seed", seed];
    let with = |verb: &str, sets: &[String]| -> PathBuf {
        let mut args: Vec<&str> = vec![verb];
        args.extend(base);
        for s in sets {
            args.push("--set");
            args.push(s);
        }
        ok(&args, out)
    };
    let data = with("gen-data", &[]).join("data");
    let root = format!("data.root={}", data.display());
    let tokenizers = with("train-tokenizer", &[root.clone()]);
    let toks = format!("checkpoints.tokenizers={}", tokenizers.join("tokenizers").display());
    let pretrain = with("pretrain", &[root.clone(), toks.clone()]);
    let pre_model = format!("checkpoints.model={}", pretrain.join("model.json").display());
    let finetune = with(
        "finetune",
        &[root.clone(), toks.clone(), pre_model.clone(), "checkpoints.domain=right".into()],
    );
    let ft_model = format!("checkpoints.model={}", finetune.join("model.json").display());
    let evaluate = with("evaluate", &[root.clone(), toks.clone(), ft_model]);
    let grid = with("grid", &[root.clone()]);
    let stats = with("stats", &[root.clone(), toks.clone()]);
    let embeddings = with("export-embeddings", &[root.clone(), toks.clone(), pre_model]);
    let dump = with("dump-prompt", &[root.clone(), toks, "checkpoints.domain=left".into()]);
    Chain {
        data: data.parent().unwrap().to_path_buf(),
        tokenizers,
        pretrain,
        finetune,
        evaluate,
        grid,
        stats,
        embeddings,
        dump,
    }
}
