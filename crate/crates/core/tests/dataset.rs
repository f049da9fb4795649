mod common;

use std::f64::consts::PI;
use std::fs;

use ndarray::{array, Array2};
use proptest::prelude::*;
use tsgen_core::dataset::{
    generate_synthetic_corpus, generate_synthetic_domain, load_corpus, normalize, subset_train, write_corpus,
    CorpusSplit, SyntheticSpec, Waveform,
};
use tsgen_core::{Error, TimeSeriesInstance};

use common::small_synthetic;

fn with_values(values: Array2<f64>) -> TimeSeriesInstance {
    TimeSeriesInstance {
        id: "x".into(),
        domain: "d".into(),
        values,
        labels: vec!["a".into()],
        context: Vec::new(),
    }
}

fn two_domain_corpus() -> tsgen_core::Corpus {
    use Waveform::*;
    let mut a = small_synthetic("one", &[Sine, Square], 6);
    a.with_context = true;
    a.multi_label_fraction = 0.5;
    let mut b = small_synthetic("two", &[Sawtooth, NoiseBurst, Sine], 4);
    b.channels = 2;
    generate_synthetic_corpus(&[a, b], 3).unwrap()
}

#[test]
fn corpus_survives_a_disk_round_trip_byte_for_byte() {
    let corpus = two_domain_corpus();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    write_corpus(&corpus, &first).unwrap();
    let loaded = load_corpus(&first).unwrap();
    assert_eq!(loaded.names(), vec!["one", "two"]);
    assert_eq!(loaded.get("one").unwrap().split.train.len(), 12);
    assert_eq!(loaded.get("two").unwrap().split.test.len(), 6);
    assert_eq!(loaded, corpus);
    write_corpus(&loaded, &second).unwrap();
    for rel in ["manifest.json", "one/train.csv", "one/test.csv", "two/train.csv", "two/test.csv"] {
        assert_eq!(fs::read(first.join(rel)).unwrap(), fs::read(second.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn manifest_fields_become_the_domain_spec() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<String> = (0..8)
        .map(|i| format!(r#"{{"id": "s{i}", "text": "sleep stage {}"}}"#, ["w", "n", "r", "x", "y", "z", "q", "p"][i]))
        .collect();
    let manifest = format!(
        r#"{{"domains": [{{"name": "eeg", "channels": 2, "length": 3000, "patch_size": 25,
        "codebook_size": 384, "token_budget": 120, "task_description": "Stage the sleep record.",
        "labels": [{}], "context_schema": []}}]}}"#,
        labels.join(",")
    );
    fs::write(dir.path().join("manifest.json"), manifest).unwrap();
    fs::create_dir(dir.path().join("eeg")).unwrap();
    let row = |id: &str| {
        let vals: Vec<String> = (0..6000).map(|i| format!("{}", (i as f64 * 0.01).sin())).collect();
        format!("{id},s3,,{}\n", vals.join(","))
    };
    fs::write(dir.path().join("eeg/train.csv"), row("t0") + &row("t1")).unwrap();
    fs::write(dir.path().join("eeg/test.csv"), row("e0")).unwrap();
    let corpus = load_corpus(dir.path()).unwrap();
    let d = corpus.get("eeg").unwrap();
    assert_eq!((d.spec.length, d.spec.channels, d.spec.labels.len()), (3000, 2, 8));
    assert_eq!(d.spec.num_patches(), 120);
    assert_eq!(d.split.train.len(), 2);
}

#[test]
fn missing_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(Error::Config(_))));
}

#[test]
fn bad_records_name_file_and_index() {
    let corpus = two_domain_corpus();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    let path = dir.path().join("two/train.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();

    // A third channel's worth of values on record 2.
    let extra = vec!["0.5"; 32].join(",");
    let original = lines[2].clone();
    lines[2] = format!("{original},{extra}");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load_corpus(dir.path()) {
        Err(Error::Instance { file, index, reason }) => {
            assert!(file.ends_with("two/train.csv"));
            assert_eq!(index, 2);
            assert!(reason.contains("shape mismatch") && reason.contains("3 channels"), "{reason}");
        }
        other => panic!("expected an instance error, got {other:?}"),
    }

    lines[2] = original.replacen(",", ",", 1);
    let mut fields: Vec<&str> = lines[2].split(',').collect();
    fields[5] = "NaN";
    lines[2] = fields.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(Error::Instance { index: 2, .. })));
}

#[test]
fn manifest_counts_are_enforced() {
    let corpus = two_domain_corpus();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    let path = dir.path().join("one/test.csv");
    let text = fs::read_to_string(&path).unwrap();
    let first_line = text.lines().next().unwrap().to_string();
    fs::write(&path, first_line + "\n").unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(Error::Config(_))));
}

#[test]
fn zscore_worked_examples() {
    let out = normalize(&with_values(array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]));
    let k = (1.5f64).sqrt();
    for (got, want) in out.values.column(0).iter().zip([-k, 0.0, k]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!((out.values[[0, 0]] + 1.2247).abs() < 1e-4);
    assert!(out.values.column(1).iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn normalize_is_idempotent_and_per_channel(
        raw in prop::collection::vec(-50.0f64..50.0, 3 * 10),
        perm in Just([2usize, 0, 1]),
    ) {
        let values = Array2::from_shape_vec((10, 3), raw).unwrap();
        let once = normalize(&with_values(values.clone()));
        let twice = normalize(&once);
        for (a, b) in once.values.iter().zip(twice.values.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for col in once.values.columns() {
            let mean = col.sum() / 10.0;
            prop_assert!(mean.abs() < 1e-9);
        }
        let permuted = values.select(ndarray::Axis(1), &perm);
        let p_then_n = normalize(&with_values(permuted)).values;
        let n_then_p = once.values.select(ndarray::Axis(1), &perm);
        prop_assert_eq!(p_then_n, n_then_p);
    }

    #[test]
    fn subset_size_is_the_ceiling(n in 1usize..200, tenths in 1u32..=10, seed in 0u64..1000) {
        let spec = small_synthetic("p", &[Waveform::Sine, Waveform::Square], n.div_ceil(2));
        let split = generate_synthetic_domain(&spec, 1).unwrap().split;
        let split = CorpusSplit::new(split.train[..n].to_vec(), split.test);
        let f = tenths as f64 / 10.0;
        let sub = subset_train(&split, f, seed).unwrap();
        let expect = (f * n as f64 - 1e-9).ceil() as usize;
        prop_assert_eq!(sub.train.len(), expect);
        let again = subset_train(&split, f, seed).unwrap();
        prop_assert_eq!(sub, again);
    }
}

#[test]
fn subset_is_stratified_by_first_label() {
    let spec = small_synthetic("s", &[Waveform::Sine, Waveform::Square], 50);
    let split = generate_synthetic_domain(&spec, 2).unwrap().split;
    assert_eq!(split.train.len(), 100);
    let sub = subset_train(&split, 0.1, 9).unwrap();
    assert_eq!(sub.train.len(), 10);
    let sines = sub.train.iter().filter(|i| i.first_label() == "sine").count();
    assert_eq!(sines, 5);
    assert_eq!(subset_train(&split, 1.0, 9).unwrap().train, split.train);
    assert!(matches!(subset_train(&split, 0.0, 1), Err(Error::Argument(_))));
    assert!(matches!(subset_train(&split, 1.5, 1), Err(Error::Argument(_))));
}

#[test]
fn noiseless_sine_is_exact() {
    let mut spec = SyntheticSpec::new("clean", &[Waveform::Sine, Waveform::Square]);
    spec.noise = 0.0;
    spec.random_phase = false;
    spec.freq_range = (4.0, 4.0);
    spec.train_per_class = 3;
    spec.test_per_class = 1;
    let d = generate_synthetic_domain(&spec, 0).unwrap();
    let sine = d.split.train.iter().find(|i| i.labels == ["sine"]).unwrap();
    let l = spec.length as f64;
    for (t, &v) in sine.values.column(0).iter().enumerate() {
        assert_eq!(v, (2.0 * PI * 4.0 * t as f64 / l).sin());
    }
}

#[test]
fn split_sizes_and_disjointness() {
    let spec = SyntheticSpec::new("c", &[Waveform::Sine, Waveform::Sawtooth]);
    let d = generate_synthetic_domain(&spec, 4).unwrap();
    assert_eq!((d.split.train.len(), d.split.test.len()), (400, 100));
    let train: std::collections::HashSet<_> = d.split.train.iter().map(|i| &i.id).collect();
    assert!(d.split.test.iter().all(|i| !train.contains(&i.id)));
    assert_eq!(d, generate_synthetic_domain(&spec, 4).unwrap());
    assert_ne!(d, generate_synthetic_domain(&spec, 5).unwrap());
}

#[test]
fn fewer_than_two_classes_is_rejected() {
    let spec = SyntheticSpec::new("c", &[Waveform::Sine, Waveform::Sine]);
    assert!(matches!(generate_synthetic_domain(&spec, 0), Err(Error::Argument(_))));
}

#[test]
fn classes_are_separable_by_one_nearest_neighbour() {
    let spec = SyntheticSpec::new("nn", &[Waveform::Sine, Waveform::Square, Waveform::Sawtooth]);
    let d = generate_synthetic_domain(&spec, 6).unwrap();
    let (train, test) = (&d.split.train, &d.split.test);
    let mut correct = 0;
    for q in test {
        let mut best = (f64::INFINITY, "");
        for r in train {
            let dist: f64 = q.values.iter().zip(r.values.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            if dist < best.0 {
                best = (dist, r.first_label());
            }
        }
        correct += usize::from(best.1 == q.first_label());
    }
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "1-NN accuracy {acc}");
}
