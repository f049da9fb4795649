use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tsgen_core::config::RunConfig;
use tsgen_core::dataset::{self, generate_synthetic_corpus, load_corpus, write_corpus};
use tsgen_core::eval::{self, ResultRow};
use tsgen_core::lm::{CodebookTable, PhaseTag};
use tsgen_core::prompt::{self, build_vocabulary};
use tsgen_core::train::{self, Prediction, RunRecord};
use tsgen_core::{Corpus, DecoderModel, DomainData, PromptMode, Tokenizer, Vocabulary};

pub const RESULTS_FILE: &str = "results.csv";
const CHECKPOINTS_FILE: &str = "checkpoints.txt";

/// Check the keys `verb` needs before anything is computed.
pub fn validate(verb: &str, cfg: &RunConfig) -> Result<()> {
    let need: &[&str] = match verb {
        "gen-data" => &[],
        "train-tokenizer" | "grid" => &["data.root"],
        "pretrain" | "stats" => &["data.root", "checkpoints.tokenizers"],
        "finetune" | "dump-prompt" => &["data.root", "checkpoints.tokenizers", "checkpoints.domain"],
        "evaluate" | "export-embeddings" => &["data.root", "checkpoints.tokenizers", "checkpoints.model"],
        other => bail!("unknown verb `{other}`"),
    };
    for key in need {
        let value = match *key {
            "data.root" => &cfg.data.root,
            "checkpoints.tokenizers" => &cfg.checkpoints.tokenizers,
            "checkpoints.domain" => &cfg.checkpoints.domain,
            "checkpoints.model" => &cfg.checkpoints.model,
            _ => unreachable!(),
        };
        if value.is_empty() {
            bail!("`{key}` must be set for `{verb}`");
        }
    }
    if verb == "gen-data" && cfg.data.synthetic.is_empty() {
        bail!("`data.synthetic` lists no domains");
    }
    if verb == "grid" && (cfg.grid.codebook_sizes.is_empty() || cfg.grid.fractions.is_empty()) {
        bail!("`grid.codebook_sizes` and `grid.fractions` must be non-empty");
    }
    Ok(())
}

pub fn execute(verb: &str, cfg: &RunConfig, dir: &Path) -> Result<()> {
    match verb {
        "gen-data" => gen_data(cfg, dir),
        "train-tokenizer" => train_tokenizer(cfg, dir),
        "pretrain" => pretrain(cfg, dir),
        "finetune" => finetune(cfg, dir),
        "evaluate" => evaluate(cfg, dir),
        "grid" => grid(cfg, dir),
        "stats" => stats(cfg, dir),
        "export-embeddings" => export_embeddings(cfg, dir),
        "dump-prompt" => dump_prompt(cfg, dir),
        other => bail!("unknown verb `{other}`"),
    }
}

fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    Ok(load_corpus(&cfg.data.root)?.normalized())
}

/// Tokenizers found in `checkpoints.tokenizers`, keyed by domain. Domains
/// without a checkpoint file are skipped.
fn tokenizers(cfg: &RunConfig, corpus: &Corpus) -> Result<BTreeMap<String, Tokenizer>> {
    let root = PathBuf::from(&cfg.checkpoints.tokenizers);
    let mut out = BTreeMap::new();
    for d in &corpus.domains {
        let path = root.join(format!("{}.json", d.spec.name));
        if path.is_file() {
            out.insert(d.spec.name.clone(), Tokenizer::load(&path, &d.spec)?);
        }
    }
    if out.is_empty() {
        bail!("no tokenizer checkpoints in {}", root.display());
    }
    Ok(out)
}

fn domain<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a DomainData> {
    corpus
        .get(name)
        .with_context(|| format!("domain `{name}` is not in the corpus"))
}

fn tokenizer<'a>(toks: &'a BTreeMap<String, Tokenizer>, name: &str) -> Result<&'a Tokenizer> {
    toks.get(name)
        .with_context(|| format!("domain `{name}` has no trained tokenizer"))
}

fn record_checkpoint(dir: &Path, rel: &str, sha: &str) -> Result<()> {
    let path = dir.join(CHECKPOINTS_FILE);
    let mut text = fs::read_to_string(&path).unwrap_or_default();
    let _ = writeln!(text, "{rel} {sha}");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = generate_synthetic_corpus(&cfg.data.synthetic, cfg.seed)?;
    write_corpus(&corpus, dir.join("data"))?;
    for d in &corpus.domains {
        println!("{}: {} train, {} test", d.spec.name, d.split.train.len(), d.split.test.len());
    }
    Ok(())
}

fn train_tokenizer(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = corpus(cfg)?;
    let toks = train::train_tokenizers(&corpus, &cfg.tokenizer, cfg.seed)?;
    let mut csv = String::from("domain,K,patch,mse,codes_used,sha256\n");
    for d in &corpus.domains {
        let tok = &toks[&d.spec.name];
        let rel = format!("tokenizers/{}.json", d.spec.name);
        let sha = tok.save(&dir.join(&rel))?;
        record_checkpoint(dir, &rel, &sha)?;
        let mse = tok.reconstruction_mse(&d.split.test)?;
        let used = eval::token_frequency(&d.split.test, tok)?
            .counts
            .iter()
            .filter(|&&c| c > 0)
            .count();
        let _ = writeln!(
            csv,
            "{},{},{},{},{used},{sha}",
            d.spec.name,
            d.spec.codebook_size,
            d.spec.patch_size,
            eval::fmt_real(mse)
        );
        println!("{}: mse {mse:.4}, {used}/{} codes used", d.spec.name, d.spec.codebook_size);
    }
    fs::write(dir.join("tokenizers.csv"), csv)?;
    Ok(())
}

fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    let mut epochs = String::from("epoch,train_loss,validation_loss\n");
    for e in &record.epochs {
        let val = e.validation_loss.map(eval::fmt_real).unwrap_or_default();
        let _ = writeln!(epochs, "{},{},{val}", e.epoch, eval::fmt_real(e.train_loss));
    }
    fs::write(dir.join("epochs.csv"), epochs)?;
    let mut steps = String::from("step,loss\n");
    for (i, l) in record.loss_history.iter().enumerate() {
        let _ = writeln!(steps, "{},{}", i + 1, eval::fmt_real(*l));
    }
    fs::write(dir.join("loss.csv"), steps)?;
    println!(
        "{}: {} steps, kept epoch {} ({:.1}s)",
        record.phase,
        record.loss_history.len(),
        record.selected_epoch,
        record.wall_clock_secs
    );
    Ok(())
}

fn save_model(dir: &Path, model: &DecoderModel) -> Result<()> {
    let sha = model.save(&dir.join("model.json"))?;
    record_checkpoint(dir, "model.json", &sha)
}

fn d_code(toks: &BTreeMap<String, Tokenizer>) -> usize {
    toks.values().next().map_or(0, |t| t.config.d_code)
}

fn pretrain(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = corpus(cfg)?;
    let toks = tokenizers(cfg, &corpus)?;
    let vocab = build_vocabulary(&corpus.specs())?;
    let model = DecoderModel::new(&cfg.model, &vocab, d_code(&toks), cfg.seed)?;
    let (model, record) = train::pretrain(&corpus, &toks, &vocab, model, &cfg.pretrain)?;
    save_model(dir, &model)?;
    write_record(dir, &record)
}

fn write_predictions(path: &Path, preds: &[Prediction], vocab: &Vocabulary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "truth", "predicted", "truncated", "generated"])?;
    for p in preds {
        w.write_record([
            p.id.clone(),
            p.truth.join(";"),
            p.predicted.join(";"),
            p.truncated.to_string(),
            vocab.decode(&p.generated),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn finetune(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = corpus(cfg)?;
    let toks = tokenizers(cfg, &corpus)?;
    let vocab = build_vocabulary(&corpus.specs())?;
    let name = &cfg.checkpoints.domain;
    let data = domain(&corpus, name)?;
    let tok = tokenizer(&toks, name)?;
    let start = if cfg.checkpoints.model.is_empty() {
        DecoderModel::new(&cfg.model, &vocab, tok.config.d_code, cfg.seed)?
    } else {
        DecoderModel::load(Path::new(&cfg.checkpoints.model))?
    };
    let pretrained = start.phase != PhaseTag::Fresh;
    let subset = DomainData {
        spec: data.spec.clone(),
        split: dataset::subset_train(&data.split, cfg.data.fraction, cfg.seed)?,
    };
    let mut sft = cfg.finetune.clone();
    sft.domains = vec![name.clone()];
    let (model, record) = train::finetune(&subset, tok, &vocab, start, &sft)?;
    save_model(dir, &model)?;
    write_record(dir, &record)?;
    let setting = if pretrained { "adapt" } else { "scratch" };
    let (report, preds) = train::evaluate(&subset, tok, &vocab, &model, &cfg.eval, setting)?;
    let row = train::report_row(&report, &subset.spec, &subset.split, pretrained, cfg.pretrain.text_in_pretrain, cfg.seed);
    eval::write_results_csv(&[row], &dir.join(RESULTS_FILE))?;
    write_predictions(&dir.join("predictions.csv"), &preds, &vocab)?;
    println!("{name}: accuracy {:.4}, f1 {:.4}", report.accuracy, report.f1);
    Ok(())
}

fn evaluate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = corpus(cfg)?;
    let toks = tokenizers(cfg, &corpus)?;
    let vocab = build_vocabulary(&corpus.specs())?;
    let model = DecoderModel::load(Path::new(&cfg.checkpoints.model))?;
    let requested = &cfg.checkpoints.domain;
    let (names, setting): (Vec<String>, &str) = match &model.phase {
        PhaseTag::Sft(d) => {
            if !requested.is_empty() && requested != d {
                bail!("checkpoint is fine-tuned on `{d}`, not `{requested}`");
            }
            (vec![d.clone()], "adapt")
        }
        PhaseTag::Pretrained if requested.is_empty() => (corpus.names(), "universal"),
        PhaseTag::Pretrained => (vec![requested.clone()], "universal"),
        PhaseTag::Fresh if requested.is_empty() => bail!("`checkpoints.domain` must be set for an untrained model"),
        PhaseTag::Fresh => (vec![requested.clone()], "untrained"),
    };
    let mut rows: Vec<ResultRow> = Vec::new();
    let mut all_preds = Vec::new();
    for name in &names {
        let data = domain(&corpus, name)?;
        let tok = tokenizer(&toks, name)?;
        let (report, preds) = train::evaluate(data, tok, &vocab, &model, &cfg.eval, setting)?;
        println!("{name}: accuracy {:.4}, f1 {:.4}", report.accuracy, report.f1);
        rows.push(train::report_row(
            &report,
            &data.spec,
            &data.split,
            model.phase != PhaseTag::Fresh,
            cfg.pretrain.text_in_pretrain,
            cfg.seed,
        ));
        all_preds.extend(preds);
    }
    eval::write_results_csv(&rows, &dir.join(RESULTS_FILE))?;
    write_predictions(&dir.join("predictions.csv"), &all_preds, &vocab)
}

fn grid(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = corpus(cfg)?;
    let rows = train::run_ablation_grid(&corpus, &cfg.grid, &cfg.grid_base())?;
    let failed = rows.iter().filter(|r| r.setting == "failed").count();
    eval::write_results_csv(&rows, &dir.join(RESULTS_FILE))?;
    println!("grid: {} rows, {failed} failed", rows.len());
    Ok(())
}

fn stats(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = corpus(cfg)?;
    let toks = tokenizers(cfg, &corpus)?;
    let mut tables = Vec::new();
    for d in &corpus.domains {
        if let Some(tok) = toks.get(&d.spec.name) {
            let t = eval::token_frequency(&d.split.train, tok)?;
            let used = t.counts.iter().filter(|&&c| c > 0).count();
            println!("{}: {used}/{} codes used over {} tokens", t.domain, t.counts.len(), t.total);
            tables.push(t);
        }
    }
    eval::write_token_frequency_csv(&tables, &dir.join("token_frequency.csv"))?;
    Ok(())
}

fn export_embeddings(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = corpus(cfg)?;
    let toks = tokenizers(cfg, &corpus)?;
    let vocab = build_vocabulary(&corpus.specs())?;
    let model = DecoderModel::load(Path::new(&cfg.checkpoints.model))?;
    model.check_vocabulary(&vocab)?;
    let names = if cfg.checkpoints.domain.is_empty() {
        toks.keys().cloned().collect()
    } else {
        vec![cfg.checkpoints.domain.clone()]
    };
    let used: Vec<&Tokenizer> = names.iter().map(|n| tokenizer(&toks, n)).collect::<Result<_>>()?;
    let table = CodebookTable::from_tokenizers(&vocab, &used)?;
    let mut prompts = Vec::new();
    let mut labels = Vec::new();
    for (name, tok) in names.iter().zip(&used) {
        let data = domain(&corpus, name)?;
        let take = cfg.eval.embedding_samples.min(data.split.test.len());
        let insts = &data.split.test[..take];
        prompts.extend(train::build_prompts(
            insts,
            &data.spec,
            tok,
            &vocab,
            PromptMode::SftInfer,
            false,
            model.config.context_window,
        )?);
        labels.extend(std::iter::repeat_n(name.clone(), take));
    }
    let points = eval::export_pooled_embeddings(&prompts, &model, &table)?;
    eval::write_embedding_csv(&points, &labels, &dir.join("embeddings.csv"))?;
    println!("exported {} points", labels.len());
    Ok(())
}

fn dump_prompt(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = corpus(cfg)?;
    let toks = tokenizers(cfg, &corpus)?;
    let vocab = build_vocabulary(&corpus.specs())?;
    let name = &cfg.checkpoints.domain;
    let data = domain(&corpus, name)?;
    let tok = tokenizer(&toks, name)?;
    let Some(inst) = data.split.train.first() else {
        bail!("domain `{name}` has an empty training split");
    };
    let codes = tok.tokenize(inst)?;
    let p = prompt::build_prompt(inst, &codes, &data.spec, &vocab, PromptMode::SftTrain)?;
    let text = prompt::dump(&p, &vocab);
    fs::write(dir.join("prompt.txt"), &text)?;
    print!("{text}");
    Ok(())
}
