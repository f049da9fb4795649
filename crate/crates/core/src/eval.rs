//! Label parsing, classification metrics and analysis exports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{DomainSpec, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::lm::{mean_pool, CodebookTable, DecoderModel};
use crate::prompt::{PromptSequence, TokenId, Vocabulary};
use crate::text;
use crate::vq::Tokenizer;

pub type LabelSet = BTreeSet<String>;

/// Labels whose full sentence occurs as a word run of the decoded output.
/// Longer sentences are matched first and matched words are consumed.
pub fn parse_labels(generated: &[TokenId], vocab: &Vocabulary, spec: &DomainSpec) -> LabelSet {
    parse_words(&vocab.decode_words(generated), spec)
}

/// [`parse_labels`] on already-decoded words.
pub fn parse_words(words: &[String], spec: &DomainSpec) -> LabelSet {
    let mut sentences: Vec<(usize, Vec<String>)> = spec
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (i, text::words(&l.text)))
        .collect();
    sentences.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    let mut used = vec![false; words.len()];
    let mut found = LabelSet::new();
    for (idx, sentence) in sentences {
        let mut from = 0;
        while let Some(at) = text::find_run(words, &sentence, from) {
            if used[at..at + sentence.len()].iter().any(|&u| u) {
                from = at + 1;
                continue;
            }
            used[at..at + sentence.len()].fill(true);
            found.insert(spec.labels[idx].id.clone());
            break;
        }
    }
    found
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub domain: String,
    pub setting: String,
    pub accuracy: f64,
    pub f1: f64,
    pub mse: Option<f64>,
    pub n_test: usize,
    pub per_label_f1: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn labeled(mut self, domain: &str, setting: &str) -> Self {
        self.domain = domain.to_string();
        self.setting = setting.to_string();
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl LabelCounts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

fn check_lengths(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Argument("nothing to score".into()));
    }
    Ok(())
}

fn report(correct: usize, n: usize, counts: BTreeMap<String, LabelCounts>) -> MetricsReport {
    let per_label_f1: BTreeMap<String, f64> =
        counts.iter().map(|(k, c)| (k.clone(), c.f1())).collect();
    let f1 = if per_label_f1.is_empty() {
        1.0
    } else {
        per_label_f1.values().sum::<f64>() / per_label_f1.len() as f64
    };
    MetricsReport {
        domain: String::new(),
        setting: String::new(),
        accuracy: correct as f64 / n as f64,
        f1,
        mse: None,
        n_test: n,
        per_label_f1,
    }
}

/// Per-label counts for single-label truths. A prediction that is not a
/// single label is wrong: every predicted label gets a false positive and
/// the truth a false negative.
pub fn multiclass_counts(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<BTreeMap<String, LabelCounts>> {
    check_lengths(predictions, truths)?;
    let mut counts: BTreeMap<String, LabelCounts> = BTreeMap::new();
    for (pred, truth) in predictions.iter().zip(truths) {
        if truth.len() != 1 {
            return Err(Error::Argument(format!(
                "multi-class truth must hold exactly one label, got {}",
                truth.len()
            )));
        }
        let t = truth.iter().next().expect("one label");
        if pred.len() == 1 && pred.contains(t) {
            counts.entry(t.clone()).or_default().tp += 1;
            continue;
        }
        counts.entry(t.clone()).or_default().fn_ += 1;
        for p in pred {
            counts.entry(p.clone()).or_default().fp += 1;
        }
    }
    Ok(counts)
}

pub fn score_multiclass(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<MetricsReport> {
    let counts = multiclass_counts(predictions, truths)?;
    let correct = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(report(correct, truths.len(), counts))
}

pub fn multilabel_counts(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<BTreeMap<String, LabelCounts>> {
    check_lengths(predictions, truths)?;
    let mut counts: BTreeMap<String, LabelCounts> = BTreeMap::new();
    for (pred, truth) in predictions.iter().zip(truths) {
        for l in pred.union(truth) {
            let c = counts.entry(l.clone()).or_default();
            match (pred.contains(l), truth.contains(l)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => unreachable!(),
            }
        }
    }
    Ok(counts)
}

/// Exact-set-match accuracy and macro F1 over set membership.
pub fn score_multilabel(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<MetricsReport> {
    let counts = multilabel_counts(predictions, truths)?;
    let correct = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(report(correct, truths.len(), counts))
}

/// Multi-label scoring when any truth carries several labels, multi-class
/// scoring otherwise.
pub fn score(predictions: &[LabelSet], truths: &[LabelSet]) -> Result<MetricsReport> {
    if truths.iter().all(|t| t.len() == 1) {
        score_multiclass(predictions, truths)
    } else {
        score_multilabel(predictions, truths)
    }
}

pub fn truth_set(instance: &TimeSeriesInstance) -> LabelSet {
    instance.labels.iter().cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFrequencyTable {
    pub domain: String,
    pub counts: Vec<u64>,
    pub total: u64,
}

/// How often each code occurs across `instances`.
pub fn token_frequency(instances: &[TimeSeriesInstance], tokenizer: &Tokenizer) -> Result<TokenFrequencyTable> {
    let mut counts = vec![0u64; tokenizer.codebook_size()];
    for inst in instances {
        for code in tokenizer.tokenize(inst)? {
            counts[code] += 1;
        }
    }
    let total = counts.iter().sum();
    Ok(TokenFrequencyTable {
        domain: tokenizer.domain.clone(),
        counts,
        total,
    })
}

/// CSV `domain,code,count`.
pub fn write_token_frequency_csv(tables: &[TokenFrequencyTable], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["domain", "code", "count"]).map_err(|e| csv_err(path, e))?;
    for t in tables {
        for (k, c) in t.counts.iter().enumerate() {
            w.write_record([t.domain.clone(), k.to_string(), c.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Project rows onto their top two principal components. Each axis is
/// oriented so that its largest-magnitude loading is positive.
pub fn pca_2d(data: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = data.dim();
    if n < 3 {
        return Err(Error::InsufficientSample { need: 3, got: n });
    }
    let mean = data.mean_axis(ndarray::Axis(0)).expect("rows present");
    let centered = data - &mean;
    let x = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = Array2::zeros((n, 2));
    for (axis, &k) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            v = -v;
        }
        let proj = &x * v;
        for i in 0..n {
            out[[i, axis]] = proj[i];
        }
    }
    Ok(out)
}

/// Mean-pooled final hidden states of each prompt, reduced to 2-D.
pub fn export_pooled_embeddings(
    prompts: &[PromptSequence],
    model: &DecoderModel,
    table: &CodebookTable,
) -> Result<Array2<f64>> {
    if prompts.len() < 3 {
        return Err(Error::InsufficientSample {
            need: 3,
            got: prompts.len(),
        });
    }
    let d = model.config.d_model;
    let mut pooled = Array2::zeros((prompts.len(), d));
    for (i, p) in prompts.iter().enumerate() {
        let hidden = model.hidden_states(p, table)?;
        pooled.row_mut(i).assign(&mean_pool(&hidden.view(), p.unpadded_len()));
    }
    pca_2d(&pooled)
}

/// CSV `x,y,domain`.
pub fn write_embedding_csv(points: &Array2<f64>, domains: &[String], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["x", "y", "domain"]).map_err(|e| csv_err(path, e))?;
    for (row, domain) in points.rows().into_iter().zip(domains) {
        w.write_record([fmt_real(row[0]), fmt_real(row[1]), domain.clone()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub domain: String,
    pub setting: String,
    pub k: usize,
    pub patch: usize,
    pub fraction: f64,
    pub pretrain: bool,
    pub text: bool,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub mse: Option<f64>,
    pub seed: u64,
}

pub const RESULTS_HEADER: [&str; 11] = [
    "domain", "setting", "K", "patch", "fraction", "pretrain", "text", "accuracy", "f1", "mse", "seed",
];

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RESULTS_HEADER).map_err(|e| csv_err(path, e))?;
    let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.domain.clone(),
            r.setting.clone(),
            r.k.to_string(),
            r.patch.to_string(),
            r.fraction.to_string(),
            r.pretrain.to_string(),
            r.text.to_string(),
            opt(r.accuracy),
            opt(r.f1),
            opt(r.mse),
            r.seed.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != RESULTS_HEADER {
        return Err(Error::Config(format!("{}: unexpected results header", path.display())));
    }
    let bad = |what: &str| Error::Config(format!("{}: malformed {what}", path.display()));
    let real = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(what))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(ResultRow {
            domain: rec[0].to_string(),
            setting: rec[1].to_string(),
            k: rec[2].parse().map_err(|_| bad("K"))?,
            patch: rec[3].parse().map_err(|_| bad("patch"))?,
            fraction: rec[4].parse().map_err(|_| bad("fraction"))?,
            pretrain: rec[5].parse().map_err(|_| bad("pretrain"))?,
            text: rec[6].parse().map_err(|_| bad("text"))?,
            accuracy: real(&rec[7], "accuracy")?,
            f1: real(&rec[8], "f1")?,
            mse: real(&rec[9], "mse")?,
            seed: rec[10].parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(rows)
}

pub fn fmt_real(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}
