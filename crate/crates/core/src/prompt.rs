//! Unified vocabulary and instruction prompts.
//!
//! Id layout: five special tokens, then the sorted word-level text
//! vocabulary, then one contiguous block of `K` time-series ids per domain
//! in declared order.
//!
//! A prompt reads
//!
//! ```text
//! <bos> {task} the possible categories are : {label} ; {label} . {key} is {value} .
//! <bet> {ts ids} <eet> answer : {label} and {label} <eos>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataset::{DomainSpec, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::seed::sha256_hex;
use crate::text;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const BET: TokenId = 3;
pub const EET: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_SURFACES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<bet>", "<eet>"];

const CATEGORIES_LEAD: &str = "the possible categories are :";
const ANSWER_STEM: &str = "answer :";
const LABEL_SEPARATOR: &str = ";";
const ANSWER_JOIN: &str = "and";
const CONTEXT_LINK: &str = "is";
/// Single characters available for spelling out-of-vocabulary context values.
const SPELLING_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789.-?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentTag {
    Instruction,
    Context,
    Ts,
    Answer,
    Special,
    Pad,
}

impl fmt::Display for SegmentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegmentTag::Instruction => "instruction",
            SegmentTag::Context => "context",
            SegmentTag::Ts => "ts",
            SegmentTag::Answer => "answer",
            SegmentTag::Special => "special",
            SegmentTag::Pad => "pad",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    Pretrain,
    SftTrain,
    SftInfer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsRange {
    pub domain: String,
    pub start: TokenId,
    pub size: usize,
}

impl TsRange {
    pub fn ids(&self) -> Range<TokenId> {
        self.start..self.start + self.size as TokenId
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    text_ids: BTreeMap<String, TokenId>,
    text_tokens: Vec<String>,
    ts_ranges: Vec<TsRange>,
}

/// Build the vocabulary covering every text of `domains`.
pub fn build_vocabulary(domains: &[DomainSpec]) -> Result<Vocabulary> {
    if domains.is_empty() {
        return Err(Error::Argument("cannot build a vocabulary without domains".into()));
    }
    let mut words = BTreeSet::new();
    let template = [CATEGORIES_LEAD, ANSWER_STEM, LABEL_SEPARATOR, ANSWER_JOIN, CONTEXT_LINK, "."];
    for t in template {
        words.extend(text::words(t));
    }
    for ch in SPELLING_ALPHABET.chars() {
        words.insert(ch.to_string());
    }
    let mut seen = BTreeSet::new();
    for d in domains {
        if !seen.insert(d.name.as_str()) {
            return Err(Error::Argument(format!("duplicate domain `{}`", d.name)));
        }
        words.extend(text::words(&d.task_description));
        for l in &d.labels {
            words.extend(text::words(&l.text));
        }
        for k in &d.context_schema {
            words.extend(text::words(k));
        }
    }
    let text_tokens: Vec<String> = words.into_iter().collect();
    let text_ids = text_tokens
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), (NUM_SPECIALS + i) as TokenId))
        .collect();
    let mut next = (NUM_SPECIALS + text_tokens.len()) as TokenId;
    let ts_ranges = domains
        .iter()
        .map(|d| {
            let r = TsRange {
                domain: d.name.clone(),
                start: next,
                size: d.codebook_size,
            };
            next += d.codebook_size as TokenId;
            r
        })
        .collect();
    Ok(Vocabulary {
        text_ids,
        text_tokens,
        ts_ranges,
    })
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.first_ts_id() as usize + self.ts_ranges.iter().map(|r| r.size).sum::<usize>()
    }

    /// Specials plus text tokens: the ids served by the embedding table.
    pub fn first_ts_id(&self) -> TokenId {
        (NUM_SPECIALS + self.text_tokens.len()) as TokenId
    }

    pub fn num_text_tokens(&self) -> usize {
        self.text_tokens.len()
    }

    pub fn ts_ranges(&self) -> &[TsRange] {
        &self.ts_ranges
    }

    pub fn ts_range(&self, domain: &str) -> Option<&TsRange> {
        self.ts_ranges.iter().find(|r| r.domain == domain)
    }

    pub fn is_ts(&self, id: TokenId) -> bool {
        id >= self.first_ts_id() && (id as usize) < self.size()
    }

    /// `(domain, code)` of a time-series id.
    pub fn ts_code(&self, id: TokenId) -> Option<(&str, usize)> {
        self.ts_ranges
            .iter()
            .find(|r| r.ids().contains(&id))
            .map(|r| (r.domain.as_str(), (id - r.start) as usize))
    }

    pub fn ts_id(&self, domain: &str, code: usize) -> Result<TokenId> {
        let r = self
            .ts_range(domain)
            .ok_or_else(|| Error::Vocabulary(format!("unknown domain `{domain}`")))?;
        if code >= r.size {
            return Err(Error::Vocabulary(format!(
                "code {code} outside codebook of size {} for `{domain}`",
                r.size
            )));
        }
        Ok(r.start + code as TokenId)
    }

    pub fn text_id(&self, word: &str) -> Option<TokenId> {
        self.text_ids.get(word).copied()
    }

    /// Encode text; every word must be in the vocabulary.
    pub fn encode_text(&self, text_in: &str) -> Result<Vec<TokenId>> {
        text::words(text_in)
            .iter()
            .map(|w| {
                self.text_id(w)
                    .ok_or_else(|| Error::Vocabulary(format!("out-of-vocabulary word `{w}`")))
            })
            .collect()
    }

    /// Encode free text, spelling unknown words one character at a time.
    pub fn encode_lenient(&self, text_in: &str) -> Vec<TokenId> {
        let unknown = self.text_id("?").expect("spelling alphabet present");
        let mut out = Vec::new();
        for w in text::words(text_in) {
            match self.text_id(&w) {
                Some(id) => out.push(id),
                None => out.extend(
                    w.chars()
                        .map(|c| self.text_id(&c.to_string()).unwrap_or(unknown)),
                ),
            }
        }
        out
    }

    pub fn surface(&self, id: TokenId) -> String {
        let i = id as usize;
        if i < NUM_SPECIALS {
            return SPECIAL_SURFACES[i].to_string();
        }
        if let Some(w) = self.text_tokens.get(i - NUM_SPECIALS) {
            return w.clone();
        }
        match self.ts_code(id) {
            Some((d, k)) => format!("<ts:{d}:{k}>"),
            None => format!("<unk:{id}>"),
        }
    }

    /// Words of the text ids in `ids`; special and time-series ids are skipped.
    pub fn decode_words(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter_map(|&id| {
                let i = id as usize;
                (i >= NUM_SPECIALS)
                    .then(|| self.text_tokens.get(i - NUM_SPECIALS).cloned())
                    .flatten()
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        self.decode_words(ids).join(" ")
    }

    /// Identity of the id assignment, stored in model checkpoints.
    pub fn hash(&self) -> String {
        let payload = serde_json::to_vec(&(&self.text_tokens, &self.ts_ranges))
            .expect("vocabulary serializes");
        sha256_hex(&payload)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSequence {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<u8>,
    pub segment_tags: Vec<SegmentTag>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: TokenId, tag: SegmentTag) {
        self.ids.push(id);
        self.segment_tags.push(tag);
        self.loss_mask.push(0);
    }

    fn extend(&mut self, ids: &[TokenId], tag: SegmentTag) {
        for &id in ids {
            self.push(id, tag);
        }
    }

    /// Length without trailing padding.
    pub fn unpadded_len(&self) -> usize {
        self.segment_tags
            .iter()
            .rposition(|&t| t != SegmentTag::Pad)
            .map_or(0, |i| i + 1)
    }

    /// Positions of the `<bet>` ... `<eet>` span's time-series ids.
    pub fn ts_span(&self) -> Range<usize> {
        let start = self.ids.iter().position(|&id| id == BET).map_or(0, |i| i + 1);
        let end = self.ids.iter().position(|&id| id == EET).unwrap_or(start);
        start..end
    }

    pub fn mask_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Assemble the prompt for one instance.
pub fn build_prompt(
    instance: &TimeSeriesInstance,
    codes: &[usize],
    spec: &DomainSpec,
    vocab: &Vocabulary,
    mode: PromptMode,
) -> Result<PromptSequence> {
    if instance.domain != spec.name {
        return Err(Error::Argument(format!(
            "instance `{}` belongs to `{}`, not `{}`",
            instance.id, instance.domain, spec.name
        )));
    }
    let mut p = PromptSequence {
        ids: Vec::new(),
        loss_mask: Vec::new(),
        segment_tags: Vec::new(),
    };
    p.push(BOS, SegmentTag::Special);

    let instruction = instruction_text(spec);
    p.extend(&vocab.encode_text(&instruction)?, SegmentTag::Instruction);

    for (key, value) in &instance.context {
        let mut ids = vocab.encode_lenient(key);
        ids.push(vocab.text_id(CONTEXT_LINK).expect("template word"));
        ids.extend(vocab.encode_lenient(value));
        ids.push(vocab.text_id(".").expect("template word"));
        p.extend(&ids, SegmentTag::Context);
    }

    p.push(BET, SegmentTag::Special);
    for &code in codes {
        p.push(vocab.ts_id(&spec.name, code)?, SegmentTag::Ts);
    }
    p.push(EET, SegmentTag::Special);
    p.extend(&vocab.encode_text(ANSWER_STEM)?, SegmentTag::Instruction);

    if mode != PromptMode::SftInfer {
        let answer = answer_text(instance, spec)?;
        p.extend(&vocab.encode_text(&answer)?, SegmentTag::Answer);
        p.push(EOS, SegmentTag::Answer);
    }

    match mode {
        PromptMode::Pretrain => p.loss_mask[1..].fill(1),
        PromptMode::SftTrain => {
            for (m, &t) in p.loss_mask.iter_mut().zip(&p.segment_tags) {
                *m = u8::from(t == SegmentTag::Answer);
            }
        }
        PromptMode::SftInfer => {}
    }
    Ok(p)
}

/// Task description followed by the candidate label sentences.
pub fn instruction_text(spec: &DomainSpec) -> String {
    let labels: Vec<String> = spec.labels.iter().map(|l| text::normalize(&l.text)).collect();
    format!(
        "{} {CATEGORIES_LEAD} {} .",
        text::normalize(&spec.task_description),
        labels.join(&format!(" {LABEL_SEPARATOR} "))
    )
}

/// Label sentences of the instance in declaration order, joined by "and".
pub fn answer_text(instance: &TimeSeriesInstance, spec: &DomainSpec) -> Result<String> {
    let mut indices = Vec::with_capacity(instance.labels.len());
    for id in &instance.labels {
        let idx = spec.label_index(id).ok_or_else(|| {
            Error::Argument(format!("label `{id}` is not declared by `{}`", spec.name))
        })?;
        indices.push(idx);
    }
    if indices.is_empty() {
        return Err(Error::Argument(format!("instance `{}` has no labels", instance.id)));
    }
    indices.sort_unstable();
    indices.dedup();
    let sentences: Vec<String> = indices
        .iter()
        .map(|&i| text::normalize(&spec.labels[i].text))
        .collect();
    Ok(sentences.join(&format!(" {ANSWER_JOIN} ")))
}

/// Right-pad to `window`, or fail if the prompt is longer.
pub fn pad_or_reject(prompt: &PromptSequence, window: usize) -> Result<PromptSequence> {
    let len = prompt.len();
    if len > window {
        return Err(Error::PromptOverflow {
            len,
            window,
            segment: prompt.segment_tags[window],
        });
    }
    let mut out = prompt.clone();
    out.ids.resize(window, PAD);
    out.loss_mask.resize(window, 0);
    out.segment_tags.resize(window, SegmentTag::Pad);
    Ok(out)
}

/// Keep only the structural tokens and the time-series span.
pub fn strip_text(prompt: &PromptSequence) -> PromptSequence {
    let mut out = PromptSequence {
        ids: Vec::new(),
        loss_mask: Vec::new(),
        segment_tags: Vec::new(),
    };
    for (&id, &tag) in prompt.ids.iter().zip(&prompt.segment_tags) {
        let keep = match tag {
            SegmentTag::Ts => Some(SegmentTag::Ts),
            _ if matches!(id, BOS | BET | EET | EOS) => Some(SegmentTag::Special),
            _ => None,
        };
        if let Some(t) = keep {
            out.push(id, t);
        }
    }
    if !out.is_empty() {
        out.loss_mask[1..].fill(1);
    }
    out
}

/// One line per position: `pos | id | tag | mask | surface`.
pub fn dump(prompt: &PromptSequence, vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for i in 0..prompt.len() {
        s.push_str(&format!(
            "{i} | {} | {} | {} | {}\n",
            prompt.ids[i],
            prompt.segment_tags[i],
            prompt.loss_mask[i],
            vocab.surface(prompt.ids[i])
        ));
    }
    s
}
