mod common;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use tsgen_core::dataset::{generate_synthetic_corpus, SyntheticSpec, Waveform};
use tsgen_core::eval::{
    self, multilabel_counts, parse_labels, parse_words, pca_2d, read_results_csv, score, score_multiclass,
    score_multilabel, token_frequency, write_results_csv, LabelCounts, LabelSet, ResultRow,
};
use tsgen_core::nn::Parameters;
use tsgen_core::prompt::{build_prompt, build_vocabulary};
use tsgen_core::seed::rng_for;
use tsgen_core::text;
use tsgen_core::{Error, PromptMode, SegmentTag, Tokenizer};

use common::{instance, tiny_vq, two_label_spec};

fn set(labels: &[&str]) -> LabelSet {
    labels.iter().map(|s| s.to_string()).collect()
}

fn waveform_spec() -> tsgen_core::DomainSpec {
    use Waveform::*;
    SyntheticSpec::new("w", &[Sine, Square, Sawtooth, NoiseBurst]).domain_spec()
}

#[test]
fn exact_sentence_and_joined_sentences_parse() {
    let spec = waveform_spec();
    let w = |s: &str| text::words(s);
    assert_eq!(parse_words(&w("the signal is a sine wave"), &spec), set(&["sine"]));
    assert_eq!(
        parse_words(&w("the signal is a sine wave and the signal is a noise burst"), &spec),
        set(&["noise-burst", "sine"])
    );
    assert_eq!(parse_words(&w("the signal is a wave"), &spec), LabelSet::new());
    assert_eq!(parse_words(&[], &spec), LabelSet::new());
}

#[test]
fn parser_fuzz_recovers_the_construction_set() {
    let spec = waveform_spec();
    let filler = ["and", ";", "answer", ":", "x", "signal", "wave", "is", "a", "7"];
    let mut rng = rng_for(0, "test/parser-fuzz");
    for case in 0..500 {
        let n = rng.random_range(0..=4);
        let mut chosen: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.labels.len())).collect();
        chosen.shuffle(&mut rng);
        let mut words = Vec::new();
        for &c in &chosen {
            for _ in 0..rng.random_range(0..3) {
                words.push(filler[rng.random_range(0..filler.len())].to_string());
            }
            words.extend(text::words(&spec.labels[c].text));
        }
        for _ in 0..rng.random_range(0..3) {
            words.push(filler[rng.random_range(0..filler.len())].to_string());
        }
        let expect: LabelSet = chosen.iter().map(|&c| spec.labels[c].id.clone()).collect();
        assert_eq!(parse_words(&words, &spec), expect, "case {case}: {words:?}");
    }
}

#[test]
fn answers_of_every_synthetic_instance_parse_back() {
    let mut specs = tsgen_core::config::desk_synthetic_specs();
    for s in &mut specs {
        s.train_per_class = 20;
        s.test_per_class = 5;
        s.multi_label_fraction = 0.3;
        s.with_context = true;
    }
    let corpus = generate_synthetic_corpus(&specs, 5).unwrap();
    let vocab = build_vocabulary(&corpus.specs()).unwrap();
    let mut multi = 0;
    for d in &corpus.domains {
        for inst in d.split.train.iter().chain(&d.split.test) {
            let codes = vec![0; d.spec.num_patches()];
            let p = build_prompt(inst, &codes, &d.spec, &vocab, PromptMode::SftTrain).unwrap();
            let answer: Vec<u32> = p.ids.iter().zip(&p.segment_tags)
                .filter(|(_, &t)| t == SegmentTag::Answer).map(|(&i, _)| i).collect();
            assert_eq!(parse_labels(&answer, &vocab, &d.spec), eval::truth_set(inst), "{}", inst.id);
            multi += usize::from(inst.labels.len() > 1);
        }
    }
    assert!(multi > 0, "corpus has no multi-label instances");
}

#[test]
fn worked_two_class_example() {
    let r = score_multiclass(&[set(&["a"]), set(&["a"])], &[set(&["a"]), set(&["b"])]).unwrap();
    assert_eq!(r.accuracy, 0.5);
    assert_eq!(r.per_label_f1["a"], 2.0 / 3.0);
    assert_eq!(r.per_label_f1["b"], 0.0);
    assert_eq!(r.f1, (2.0 / 3.0 + 0.0) / 2.0);
    assert!((r.f1 - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(r.n_test, 2);
}

#[test]
fn multiclass_edge_cases() {
    let truths = [set(&["a"]), set(&["b"]), set(&["a"])];
    let perfect = score_multiclass(&truths, &truths).unwrap();
    assert_eq!((perfect.accuracy, perfect.f1), (1.0, 1.0));
    let empty = score_multiclass(&[LabelSet::new(), LabelSet::new(), LabelSet::new()], &truths).unwrap();
    assert_eq!(empty.accuracy, 0.0);
    assert_eq!(empty.f1, 0.0);
    assert!(matches!(score_multiclass(&truths[..2], &truths), Err(Error::Argument(_))));
    assert!(matches!(score_multiclass(&[set(&["a"])], &[set(&["a", "b"])]), Err(Error::Argument(_))));
}

#[test]
fn multilabel_counts_match_hand_computation() {
    let preds = [set(&["a", "b"]), set(&["a"]), LabelSet::new(), set(&["c"])];
    let truths = [set(&["a", "b"]), set(&["a", "b"]), LabelSet::new(), set(&["a"])];
    let counts = multilabel_counts(&preds, &truths).unwrap();
    let want: BTreeMap<String, LabelCounts> = [
        ("a", LabelCounts { tp: 2, fp: 0, fn_: 1 }),
        ("b", LabelCounts { tp: 1, fp: 0, fn_: 1 }),
        ("c", LabelCounts { tp: 0, fp: 1, fn_: 0 }),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    assert_eq!(counts, want);
    let r = score_multilabel(&preds, &truths).unwrap();
    assert_eq!(r.accuracy, 0.5);
    let f1 = (4.0 / 5.0 + 2.0 / 3.0 + 0.0) / 3.0;
    assert!((r.f1 - f1).abs() < 1e-15);
    // The dispatching scorer picks the multi-label path here.
    assert_eq!(score(&preds, &truths).unwrap(), r);
}

#[test]
fn empty_against_empty_is_an_exact_match() {
    let r = score_multilabel(&[LabelSet::new()], &[LabelSet::new()]).unwrap();
    assert_eq!((r.accuracy, r.f1), (1.0, 1.0));
}

#[test]
fn scorers_agree_on_singletons() {
    let mut rng = rng_for(1, "test/scorers");
    for _ in 0..50 {
        let n = rng.random_range(1..20);
        let labels = ["a", "b", "c"];
        let truths: Vec<LabelSet> = (0..n).map(|_| set(&[labels[rng.random_range(0..3)]])).collect();
        let preds: Vec<LabelSet> = (0..n).map(|_| set(&[labels[rng.random_range(0..3)]])).collect();
        let mc = score_multiclass(&preds, &truths).unwrap();
        let ml = score_multilabel(&preds, &truths).unwrap();
        assert_eq!(mc.accuracy, ml.accuracy);
        assert!((0.0..=1.0).contains(&mc.f1));
    }
}

#[test]
fn token_frequency_totals_and_degenerate_corpus() {
    let spec = two_label_spec("freq", 6);
    let mut tok = Tokenizer::init(&spec, &tiny_vq(), 3).unwrap();
    let insts: Vec<_> = (0..7).map(|s| instance(&spec, &["up"], &[], s)).collect();
    let t = token_frequency(&insts, &tok).unwrap();
    assert_eq!(t.total, (7 * spec.num_patches()) as u64);
    assert_eq!(t.counts.iter().sum::<u64>(), t.total);
    let mut reversed = insts.clone();
    reversed.reverse();
    assert_eq!(token_frequency(&reversed, &tok).unwrap(), t);

    // Zero input through a bias-free encoder gives the same vector at every patch.
    tok.model.visit_mut(&mut |name, p| {
        if name.ends_with(".b") {
            p.value.fill(0.0);
        }
    });
    let mut flat = insts[0].clone();
    flat.values.fill(0.0);
    let t = token_frequency(&vec![flat; 5], &tok).unwrap();
    assert_eq!(t.counts.iter().filter(|&&c| c > 0).count(), 1);
    assert_eq!(t.total, (5 * spec.num_patches()) as u64);
}

#[test]
fn pca_preserves_planar_distances() {
    let mut rng = rng_for(2, "test/pca");
    let d = 5;
    let u = [0.5, 0.5, 0.5, 0.5, 0.0];
    let v = [0.5, -0.5, 0.5, -0.5, 0.0];
    let n = 30;
    let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0))).collect();
    let data = Array2::from_shape_fn((n, d), |(i, j)| coords[i].0 * u[j] + coords[i].1 * v[j]);
    let out = pca_2d(&data).unwrap();
    assert_eq!(out.dim(), (n, 2));
    for i in 0..n {
        for j in 0..n {
            let orig = ((coords[i].0 - coords[j].0).powi(2) + (coords[i].1 - coords[j].1).powi(2)).sqrt();
            let got = ((out[[i, 0]] - out[[j, 0]]).powi(2) + (out[[i, 1]] - out[[j, 1]]).powi(2)).sqrt();
            assert!((orig - got).abs() < 1e-9, "{i},{j}: {orig} vs {got}");
        }
    }
    assert_eq!(out, pca_2d(&data).unwrap());
    assert!(matches!(pca_2d(&data.slice(ndarray::s![..2, ..]).to_owned()), Err(Error::InsufficientSample { .. })));
}

#[test]
fn pooled_embeddings_are_pure_per_prompt() {
    let fx = common::LmFixture::new();
    let model = fx.model(2);
    let p = fx.prompt(0, &["up"], 1, PromptMode::SftInfer);
    let q = fx.prompt(1, &["down"], 2, PromptMode::SftInfer);
    let r = fx.prompt(0, &["down"], 3, PromptMode::SftInfer);
    let pts = eval::export_pooled_embeddings(&[p.clone(), q, p, r], &model, &fx.table).unwrap();
    assert_eq!(pts.dim(), (4, 2));
    assert_eq!(pts.row(0), pts.row(2));
}

#[test]
fn results_csv_round_trips_with_fixed_header() {
    let rows = vec![
        ResultRow {
            domain: "alpha".into(),
            setting: "adapt".into(),
            k: 32,
            patch: 4,
            fraction: 0.1,
            pretrain: true,
            text: false,
            accuracy: Some(0.5),
            f1: Some(1.0 / 3.0),
            mse: Some(0.0123456789),
            seed: 7,
        },
        ResultRow {
            domain: "beta".into(),
            setting: "failed".into(),
            k: 64,
            patch: 8,
            fraction: 1.0,
            pretrain: false,
            text: true,
            accuracy: None,
            f1: None,
            mse: None,
            seed: 7,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_results_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "domain,setting,K,patch,fraction,pretrain,text,accuracy,f1,mse,seed\n\
         alpha,adapt,32,4,0.1,true,false,0.500000,0.333333,0.012346,7\n\
         beta,failed,64,8,1,false,true,,,,7\n"
    );
    let back = read_results_csv(&path).unwrap();
    assert_eq!(back[1], rows[1]);
    assert_eq!(back[0].f1, Some(0.333333));
}
