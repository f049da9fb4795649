//! Two-phase training of the decoder, evaluation settings and ablation grids.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Corpus, CorpusSplit, DomainData, DomainSpec, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport, ResultRow};
use crate::lm::{CodebookTable, DecoderModel, LmConfig, PhaseTag};
use crate::nn::Parameters;
use crate::optim::{AdamW, WarmupCosine};
use crate::prompt::{self, PromptMode, PromptSequence, TokenId, Vocabulary};
use crate::seed::rng_for;
use crate::vq::{self, Tokenizer, VqConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Pretraining: empty means every domain. Fine-tuning: exactly one.
    pub domains: Vec<String>,
    pub text_in_pretrain: bool,
    pub grad_clip: f64,
    /// Share of each domain's training set held out for epoch selection.
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            phase: Phase::Pretrain,
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 10,
            warmup_ratio: 0.05,
            weight_decay: 1e-5,
            seed: 0,
            domains: Vec::new(),
            text_in_pretrain: true,
            grad_clip: 1.0,
            validation_fraction: 0.1,
        }
    }

    pub fn sft_default() -> Self {
        Self {
            phase: Phase::Sft,
            learning_rate: 1e-5,
            epochs: 5,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.phase == Phase::Sft && self.domains.len() > 1 {
            return bad("fine-tuning takes exactly one domain");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub phase: String,
    /// One entry per optimizer step.
    pub loss_history: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned (1-based; 0 when no epoch ran).
    pub selected_epoch: usize,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

/// Hold out a stratified validation share of `instances`.
pub fn split_validation(
    instances: &[TimeSeriesInstance],
    fraction: f64,
    seed: u64,
) -> (Vec<TimeSeriesInstance>, Vec<TimeSeriesInstance>) {
    if fraction <= 0.0 || instances.len() < 2 {
        return (instances.to_vec(), Vec::new());
    }
    let held = dataset::stratified_indices(instances, fraction, seed, "validation");
    let mut is_held = vec![false; instances.len()];
    for i in held {
        is_held[i] = true;
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (inst, h) in instances.iter().zip(is_held) {
        if h {
            val.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    (train, val)
}

/// Prompts for `instances`, each checked against the context window.
pub fn build_prompts(
    instances: &[TimeSeriesInstance],
    spec: &DomainSpec,
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    mode: PromptMode,
    strip: bool,
    window: usize,
) -> Result<Vec<PromptSequence>> {
    instances
        .iter()
        .map(|inst| {
            let codes = tokenizer.tokenize(inst)?;
            let mut p = prompt::build_prompt(inst, &codes, spec, vocab, mode)?;
            if strip {
                p = prompt::strip_text(&p);
            }
            prompt::pad_or_reject(&p, window)?;
            Ok(p)
        })
        .collect()
}

fn table_for(vocab: &Vocabulary, tokenizers: &[&Tokenizer], d_code: usize) -> Result<CodebookTable> {
    let mut table = CodebookTable::new(vocab, d_code);
    for t in tokenizers {
        table.insert(vocab, &t.domain, &t.codebook)?;
    }
    Ok(table)
}

/// Mean autoregressive loss in eval mode.
pub fn mean_loss(model: &DecoderModel, prompts: &[PromptSequence], table: &CodebookTable) -> Result<f64> {
    let mut total = 0.0;
    for p in prompts {
        let logits = model.forward(p, table)?;
        total += crate::lm::ar_loss(&logits, p)?;
    }
    Ok(total / prompts.len().max(1) as f64)
}

fn train_loop(
    mut model: DecoderModel,
    train: &[PromptSequence],
    val: &[PromptSequence],
    table: &CodebookTable,
    config: &TrainConfig,
    phase: &'static str,
) -> Result<(DecoderModel, RunRecord)> {
    let start = Instant::now();
    let mut record = RunRecord {
        phase: phase.to_string(),
        loss_history: Vec::new(),
        epochs: Vec::new(),
        selected_epoch: 0,
        wall_clock_secs: 0.0,
        checkpoint: None,
    };
    if config.epochs == 0 || train.is_empty() {
        record.wall_clock_secs = start.elapsed().as_secs_f64();
        return Ok((model, record));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = WarmupCosine::new(
        config.learning_rate,
        steps_per_epoch * config.epochs,
        config.warmup_ratio,
    );
    let mut order_rng = rng_for(config.seed, &format!("train/{phase}/order"));
    let mut drop_rng = rng_for(config.seed, &format!("train/{phase}/dropout"));
    let mut opt = AdamW::new(config.weight_decay);
    let mut best: Option<(f64, usize, DecoderModel)> = None;
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            model.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                loss += model.accumulate(&train[i], table, scale, Some(&mut drop_rng))? * scale;
            }
            if !loss.is_finite() || !model.grad_norm().is_finite() {
                return Err(Error::Divergence { phase, step });
            }
            model.clip_grad_norm(config.grad_clip);
            opt.step(&mut model, schedule.lr(step));
            model.step += 1;
            record.loss_history.push(loss);
            epoch_loss += loss * chunk.len() as f64;
        }
        let validation_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss(&model, val, table)?)
        };
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            validation_loss,
        });
        if let Some(v) = validation_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.clone()));
            }
        }
    }
    record.selected_epoch = config.epochs;
    if let Some((_, epoch, m)) = best {
        record.selected_epoch = epoch;
        model = m;
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, record))
}

/// Cross-domain autoregressive pre-training on the pooled, shuffled prompts
/// of every selected domain.
pub fn pretrain(
    corpus: &Corpus,
    tokenizers: &BTreeMap<String, Tokenizer>,
    vocab: &Vocabulary,
    model: DecoderModel,
    config: &TrainConfig,
) -> Result<(DecoderModel, RunRecord)> {
    config.validate()?;
    if config.phase != Phase::Pretrain {
        return Err(Error::Config("pretrain called with a fine-tuning config".into()));
    }
    model.check_vocabulary(vocab)?;
    let names = if config.domains.is_empty() {
        corpus.names()
    } else {
        config.domains.clone()
    };
    let mut used = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for name in &names {
        let data = corpus
            .get(name)
            .ok_or_else(|| Error::Config(format!("pretraining domain `{name}` is not in the corpus")))?;
        let tok = tokenizers
            .get(name)
            .ok_or_else(|| Error::Config(format!("domain `{name}` has no trained tokenizer")))?;
        tok.check_domain(&data.spec)?;
        let (tr, va) = split_validation(&data.split.train, config.validation_fraction, config.seed);
        let strip = !config.text_in_pretrain;
        let window = model.config.context_window;
        train.extend(build_prompts(&tr, &data.spec, tok, vocab, PromptMode::Pretrain, strip, window)?);
        val.extend(build_prompts(&va, &data.spec, tok, vocab, PromptMode::Pretrain, strip, window)?);
        used.push(tok);
    }
    let table = table_for(vocab, &used, model.d_code)?;
    let (mut model, record) = train_loop(model, &train, &val, &table, config, "pretrain")?;
    if config.epochs > 0 {
        model.phase = PhaseTag::Pretrained;
    }
    Ok((model, record))
}

/// Supervised fine-tuning on one domain; the loss covers the answer only.
pub fn finetune(
    domain: &DomainData,
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    model: DecoderModel,
    config: &TrainConfig,
) -> Result<(DecoderModel, RunRecord)> {
    config.validate()?;
    if config.phase != Phase::Sft {
        return Err(Error::Config("finetune called with a pretraining config".into()));
    }
    let name = &domain.spec.name;
    if let Some(d) = config.domains.first() {
        if d != name {
            return Err(Error::Config(format!(
                "fine-tuning config names `{d}` but the data is `{name}`"
            )));
        }
    }
    model.check_vocabulary(vocab)?;
    tokenizer.check_domain(&domain.spec)?;
    let (tr, va) = split_validation(&domain.split.train, config.validation_fraction, config.seed);
    let window = model.config.context_window;
    let train = build_prompts(&tr, &domain.spec, tokenizer, vocab, PromptMode::SftTrain, false, window)?;
    let val = build_prompts(&va, &domain.spec, tokenizer, vocab, PromptMode::SftTrain, false, window)?;
    let table = table_for(vocab, &[tokenizer], model.d_code)?;
    let (mut model, record) = train_loop(model, &train, &val, &table, config, "finetune")?;
    if config.epochs > 0 {
        model.phase = PhaseTag::Sft(name.clone());
    }
    Ok((model, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    /// Per-domain sample size for the embedding export.
    pub embedding_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            embedding_samples: 200,
        }
    }
}

/// One test instance's generated answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub generated: Vec<TokenId>,
    pub predicted: Vec<String>,
    pub truth: Vec<String>,
    pub truncated: bool,
}

/// Generate an answer for every test instance and score the parsed labels.
pub fn evaluate(
    domain: &DomainData,
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    model: &DecoderModel,
    config: &EvalConfig,
    setting: &str,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    model.check_vocabulary(vocab)?;
    tokenizer.check_domain(&domain.spec)?;
    let table = table_for(vocab, &[tokenizer], model.d_code)?;
    evaluate_with_table(domain, tokenizer, vocab, model, &table, config, setting)
}

fn evaluate_with_table(
    domain: &DomainData,
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    model: &DecoderModel,
    table: &CodebookTable,
    config: &EvalConfig,
    setting: &str,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let test = &domain.split.test;
    let prompts = build_prompts(
        test,
        &domain.spec,
        tokenizer,
        vocab,
        PromptMode::SftInfer,
        false,
        model.config.context_window,
    )?;
    let mut preds = Vec::with_capacity(test.len());
    let mut predicted_sets = Vec::with_capacity(test.len());
    let mut truths = Vec::with_capacity(test.len());
    for (inst, p) in test.iter().zip(&prompts) {
        let (generated, truncated) = match model.generate(p, table, vocab, config.max_new_tokens) {
            Ok(g) => (g, false),
            Err(Error::TruncatedGeneration { partial }) => (partial, true),
            Err(e) => return Err(e),
        };
        let set = eval::parse_labels(&generated, vocab, &domain.spec);
        let truth = eval::truth_set(inst);
        preds.push(Prediction {
            id: inst.id.clone(),
            generated,
            predicted: set.iter().cloned().collect(),
            truth: truth.iter().cloned().collect(),
            truncated,
        });
        predicted_sets.push(set);
        truths.push(truth);
    }
    let mut report = eval::score(&predicted_sets, &truths)?.labeled(&domain.spec.name, setting);
    report.mse = Some(tokenizer.reconstruction_mse(test)?);
    Ok((report, preds))
}

/// Evaluate one pretrained checkpoint on every domain without fine-tuning.
pub fn evaluate_universal(
    corpus: &Corpus,
    tokenizers: &BTreeMap<String, Tokenizer>,
    vocab: &Vocabulary,
    model: &DecoderModel,
    config: &EvalConfig,
) -> Result<Vec<MetricsReport>> {
    if model.phase != PhaseTag::Pretrained {
        return Err(Error::Incompatible(format!(
            "universal evaluation needs a pretrained checkpoint, got phase `{}`",
            model.phase
        )));
    }
    model.check_vocabulary(vocab)?;
    let mut reports = Vec::new();
    for d in &corpus.domains {
        let tok = tokenizers
            .get(&d.spec.name)
            .ok_or_else(|| Error::Config(format!("domain `{}` has no trained tokenizer", d.spec.name)))?;
        reports.push(evaluate(d, tok, vocab, model, config, "universal")?.0);
    }
    Ok(reports)
}

/// Train one tokenizer per domain on its (normalized) training split.
pub fn train_tokenizers(corpus: &Corpus, config: &VqConfig, seed: u64) -> Result<BTreeMap<String, Tokenizer>> {
    let mut out = BTreeMap::new();
    for d in &corpus.domains {
        let run = vq::train_tokenizer(&d.spec, &d.split.train, config, seed)?;
        out.insert(d.spec.name.clone(), run.tokenizer);
    }
    Ok(out)
}

/// Everything an ablation grid needs besides the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub codebook_sizes: Vec<usize>,
    pub patch_sizes: Vec<usize>,
    pub fractions: Vec<f64>,
    pub text: Vec<bool>,
    pub pretrain: Vec<bool>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            codebook_sizes: vec![32],
            patch_sizes: Vec::new(),
            fractions: vec![1.0],
            text: vec![true],
            pretrain: vec![true],
        }
    }
}

/// Settings shared by every grid cell.
#[derive(Debug, Clone)]
pub struct GridBase {
    pub tokenizer: VqConfig,
    pub model: LmConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

/// Run the cross product of the grid. `patch_sizes` empty keeps each
/// domain's own patch size. A failing cell yields rows with setting
/// `failed` and no metrics; the grid carries on.
pub fn run_ablation_grid(corpus: &Corpus, grid: &GridConfig, base: &GridBase) -> Result<Vec<ResultRow>> {
    if corpus.domains.is_empty() {
        return Err(Error::Argument("grid needs at least one domain".into()));
    }
    let patches: Vec<Option<usize>> = if grid.patch_sizes.is_empty() {
        vec![None]
    } else {
        grid.patch_sizes.iter().map(|&p| Some(p)).collect()
    };
    let mut rows = Vec::new();
    for &k in &grid.codebook_sizes {
        for &patch in &patches {
            let prepared = prepare_cell(corpus, k, patch, base);
            let mut pretrained: BTreeMap<bool, Result<DecoderModel>> = BTreeMap::new();
            for &fraction in &grid.fractions {
                for &text in &grid.text {
                    for &use_pretrain in &grid.pretrain {
                        let cell = run_cell(&prepared, &mut pretrained, fraction, text, use_pretrain, base);
                        match cell {
                            Ok(mut r) => rows.append(&mut r),
                            Err(_) => {
                                for d in &corpus.domains {
                                    rows.push(ResultRow {
                                        domain: d.spec.name.clone(),
                                        setting: "failed".into(),
                                        k,
                                        patch: patch.unwrap_or(d.spec.patch_size),
                                        fraction,
                                        pretrain: use_pretrain,
                                        text,
                                        accuracy: None,
                                        f1: None,
                                        mse: None,
                                        seed: base.seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

struct PreparedCell {
    k: usize,
    corpus: Corpus,
    vocab: Vocabulary,
    tokenizers: BTreeMap<String, Tokenizer>,
}

fn prepare_cell(corpus: &Corpus, k: usize, patch: Option<usize>, base: &GridBase) -> Result<PreparedCell> {
    let mut cell = corpus.clone();
    for d in &mut cell.domains {
        d.spec.codebook_size = k;
        if let Some(p) = patch {
            d.spec.patch_size = p;
            if p == 0 || d.spec.length % p != 0 {
                return Err(Error::Config(format!(
                    "patch size {p} does not divide length {} of `{}`",
                    d.spec.length, d.spec.name
                )));
            }
            d.spec.token_budget = d.spec.length / p;
        }
        d.spec.validate()?;
    }
    let vocab = prompt::build_vocabulary(&cell.specs())?;
    let tokenizers = train_tokenizers(&cell, &base.tokenizer, base.seed)?;
    Ok(PreparedCell {
        k,
        corpus: cell,
        vocab,
        tokenizers,
    })
}

fn run_cell(
    prepared: &Result<PreparedCell>,
    pretrained: &mut BTreeMap<bool, Result<DecoderModel>>,
    fraction: f64,
    text: bool,
    use_pretrain: bool,
    base: &GridBase,
) -> Result<Vec<ResultRow>> {
    let cell = prepared.as_ref().map_err(clone_err)?;
    let d_code = base.tokenizer.d_code;
    let fresh = DecoderModel::new(&base.model, &cell.vocab, d_code, base.seed)?;
    let start = if use_pretrain {
        let entry = pretrained.entry(text).or_insert_with(|| {
            let mut cfg = base.pretrain.clone();
            cfg.text_in_pretrain = text;
            cfg.seed = base.seed;
            pretrain(&cell.corpus, &cell.tokenizers, &cell.vocab, fresh.clone(), &cfg).map(|(m, _)| m)
        });
        entry.as_ref().map_err(clone_err)?.clone()
    } else {
        fresh
    };
    let mut rows = Vec::new();
    for d in &cell.corpus.domains {
        let tok = &cell.tokenizers[&d.spec.name];
        let subset = DomainData {
            spec: d.spec.clone(),
            split: dataset::subset_train(&d.split, fraction, base.seed)?,
        };
        let mut cfg = base.finetune.clone();
        cfg.domains = vec![d.spec.name.clone()];
        cfg.seed = base.seed;
        let (model, _) = finetune(&subset, tok, &cell.vocab, start.clone(), &cfg)?;
        let setting = if use_pretrain { "adapt" } else { "scratch" };
        let (report, _) = evaluate(&subset, tok, &cell.vocab, &model, &base.eval, setting)?;
        rows.push(ResultRow {
            domain: d.spec.name.clone(),
            setting: setting.into(),
            k: cell.k,
            patch: d.spec.patch_size,
            fraction,
            pretrain: use_pretrain,
            text,
            accuracy: Some(report.accuracy),
            f1: Some(report.f1),
            mse: report.mse,
            seed: base.seed,
        });
    }
    Ok(rows)
}

fn clone_err(e: &Error) -> Error {
    Error::Config(e.to_string())
}

/// Rows for a results CSV from metrics reports of one domain setup.
pub fn report_row(report: &MetricsReport, spec: &DomainSpec, split: &CorpusSplit, pretrain: bool, text: bool, seed: u64) -> ResultRow {
    ResultRow {
        domain: report.domain.clone(),
        setting: report.setting.clone(),
        k: spec.codebook_size,
        patch: spec.patch_size,
        fraction: split.fraction,
        pretrain,
        text,
        accuracy: Some(report.accuracy),
        f1: Some(report.f1),
        mse: report.mse,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sft_rejects_several_domains() {
        let mut c = TrainConfig::sft_default();
        c.domains = vec!["a".into(), "b".into()];
        assert!(c.validate().is_err());
        c.domains.truncate(1);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn defaults_follow_the_reference_optimizer_settings() {
        let p = TrainConfig::pretrain_default();
        let s = TrainConfig::sft_default();
        assert_eq!((p.learning_rate, s.learning_rate), (5e-5, 1e-5));
        assert_eq!((p.batch_size, p.warmup_ratio, p.weight_decay), (16, 0.05, 1e-5));
        assert_eq!((p.epochs, s.epochs), (10, 5));
    }
}
