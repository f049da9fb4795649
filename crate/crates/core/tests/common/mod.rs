#![allow(dead_code)]

use ndarray::Array2;
use tsgen_core::dataset::{LabelDef, SyntheticSpec, Waveform};
use tsgen_core::lm::LmConfig;
use tsgen_core::vq::VqConfig;
use tsgen_core::{DomainSpec, TimeSeriesInstance};

pub fn two_label_spec(name: &str, k: usize) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        channels: 2,
        length: 12,
        patch_size: 3,
        codebook_size: k,
        token_budget: 4,
        task_description: "Decide what the trace shows.".into(),
        labels: vec![
            LabelDef { id: "up".into(), text: "the trace goes up".into() },
            LabelDef { id: "down".into(), text: "the trace goes down".into() },
        ],
        context_schema: vec!["site".into()],
    }
}

pub fn instance(spec: &DomainSpec, labels: &[&str], context: &[(&str, &str)], seed: u64) -> TimeSeriesInstance {
    let values = Array2::from_shape_fn((spec.length, spec.channels), |(t, h)| {
        ((t as f64 + 1.0) * (h as f64 + 2.0) * 0.37 + seed as f64 * 0.91).sin()
    });
    TimeSeriesInstance {
        id: format!("{}-{seed}", spec.name),
        domain: spec.name.clone(),
        values,
        labels: labels.iter().map(|s| s.to_string()).collect(),
        context: context.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

pub fn tiny_vq() -> VqConfig {
    VqConfig {
        d_code: 4,
        hidden: 5,
        kernel_size: 2,
        dilations: vec![1, 2],
        epochs: 2,
        batch_size: 4,
        ..VqConfig::default()
    }
}

pub fn tiny_lm(d_code: usize) -> LmConfig {
    LmConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        context_window: 96,
        dropout: 0.0,
        projector_hidden: vec![d_code, 6, 8],
    }
}

/// Small two-class synthetic recipe.
pub fn small_synthetic(name: &str, classes: &[Waveform], per_class: usize) -> SyntheticSpec {
    let mut s = SyntheticSpec::new(name, classes);
    s.length = 32;
    s.channels = 1;
    s.patch_size = 4;
    s.codebook_size = 8;
    s.train_per_class = per_class;
    s.test_per_class = per_class / 2;
    s
}

/// Run `f` on the parameter called `name`.
pub fn with_param<R>(
    model: &mut dyn tsgen_core::nn::Parameters,
    name: &str,
    f: impl FnOnce(&mut tsgen_core::nn::Param) -> R,
) -> R {
    let mut f = Some(f);
    let mut out = None;
    model.visit_mut(&mut |n, p| {
        if n == name {
            if let Some(f) = f.take() {
                out = Some(f(p));
            }
        }
    });
    out.expect("parameter exists")
}

/// Names and shapes of every parameter, in visiting order.
pub fn param_shapes(model: &dyn tsgen_core::nn::Parameters) -> Vec<(String, (usize, usize))> {
    let mut names = Vec::new();
    model.visit(&mut |n, p| names.push((n.to_string(), p.value.dim())));
    names
}

/// Two small domains with untrained tokenizers, their vocabulary and codebook table.
pub struct LmFixture {
    pub specs: Vec<DomainSpec>,
    pub tokenizers: Vec<tsgen_core::Tokenizer>,
    pub vocab: tsgen_core::Vocabulary,
    pub table: tsgen_core::lm::CodebookTable,
}

impl LmFixture {
    pub fn new() -> Self {
        let specs = vec![two_label_spec("a", 8), two_label_spec("b", 6)];
        let tokenizers: Vec<_> = specs
            .iter()
            .map(|s| tsgen_core::Tokenizer::init(s, &tiny_vq(), 1).unwrap())
            .collect();
        let vocab = tsgen_core::prompt::build_vocabulary(&specs).unwrap();
        let refs: Vec<_> = tokenizers.iter().collect();
        let table = tsgen_core::lm::CodebookTable::from_tokenizers(&vocab, &refs).unwrap();
        Self { specs, tokenizers, vocab, table }
    }

    pub fn model(&self, seed: u64) -> tsgen_core::DecoderModel {
        tsgen_core::DecoderModel::new(&tiny_lm(4), &self.vocab, 4, seed).unwrap()
    }

    pub fn prompt(&self, domain: usize, labels: &[&str], seed: u64, mode: tsgen_core::PromptMode) -> tsgen_core::PromptSequence {
        let spec = &self.specs[domain];
        let inst = instance(spec, labels, &[("site", "n2")], seed);
        let codes = self.tokenizers[domain].tokenize(&inst).unwrap();
        tsgen_core::prompt::build_prompt(&inst, &codes, spec, &self.vocab, mode).unwrap()
    }
}
