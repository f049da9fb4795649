//! Multi-domain time-series corpora.
//!
//! On disk a corpus is a directory holding `manifest.json` plus one
//! `<domain>/train.csv` and `<domain>/test.csv` per domain. Each CSV record is
//! `instance_id, label_ids, context, v_0, ..., v_{L*H-1}` where labels are
//! `|`-separated, context is `key=value;...` and the values are stored
//! time-major (all channels of step 0, then step 1, ...). Files have no
//! header row.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, sha256_hex};
use crate::text;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One labelled multivariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesInstance {
    pub id: String,
    pub domain: String,
    /// `length x channels`.
    pub values: Array2<f64>,
    pub labels: Vec<String>,
    pub context: Vec<(String, String)>,
}

impl TimeSeriesInstance {
    pub fn first_label(&self) -> &str {
        self.labels.first().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    pub id: String,
    pub text: String,
}

/// Per-domain configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub channels: usize,
    pub length: usize,
    pub patch_size: usize,
    pub codebook_size: usize,
    pub token_budget: usize,
    pub task_description: String,
    pub labels: Vec<LabelDef>,
    #[serde(default)]
    pub context_schema: Vec<String>,
}

impl DomainSpec {
    /// Number of patches (time-series tokens) per instance.
    pub fn num_patches(&self) -> usize {
        self.length / self.patch_size
    }

    pub fn label(&self, id: &str) -> Option<&LabelDef> {
        self.labels.iter().find(|l| l.id == id)
    }

    pub fn label_index(&self, id: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.id == id)
    }

    /// Content hash used to bind tokenizer checkpoints to their domain.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("domain spec serializes");
        sha256_hex(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(format!("domain `{}`: {msg}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return err("name must be a non-empty path component".into());
        }
        if self.channels == 0 || self.length == 0 || self.patch_size == 0 {
            return err("channels, length and patch_size must be positive".into());
        }
        if self.codebook_size == 0 || self.token_budget == 0 {
            return err("codebook_size and token_budget must be positive".into());
        }
        if self.length % self.patch_size != 0 {
            return err(format!(
                "patch_size {} does not divide length {}",
                self.patch_size, self.length
            ));
        }
        let tokens = self.num_patches() as f64;
        let budget = self.token_budget as f64;
        if (tokens - budget).abs() > 0.1 * budget + 1e-9 {
            return err(format!(
                "{} tokens per instance is outside 10% of the token budget {}",
                self.num_patches(),
                self.token_budget
            ));
        }
        if self.labels.is_empty() {
            return err("at least one label is required".into());
        }
        let mut ids = HashSet::new();
        for label in &self.labels {
            if label.id.is_empty() || label.id.contains(['|', ',']) {
                return err(format!("label id `{}` is empty or contains `|`/`,`", label.id));
            }
            if !ids.insert(label.id.as_str()) {
                return err(format!("duplicate label id `{}`", label.id));
            }
            if text::words(&label.text).is_empty() {
                return err(format!("label `{}` has an empty sentence", label.id));
            }
        }
        // Generated answers are parsed by sentence search, so no label sentence
        // may contain another.
        let sentences: Vec<String> = self.labels.iter().map(|l| text::normalize(&l.text)).collect();
        for (i, a) in sentences.iter().enumerate() {
            for (j, b) in sentences.iter().enumerate() {
                if i != j && b.contains(a.as_str()) {
                    return err(format!(
                        "label sentence `{}` is a substring of `{}`",
                        self.labels[i].text, self.labels[j].text
                    ));
                }
            }
        }
        for key in &self.context_schema {
            if key.is_empty() || key.contains(['=', ';', ',']) {
                return err(format!("context key `{key}` is empty or contains `=`/`;`/`,`"));
            }
        }
        Ok(())
    }

    /// Check an instance against this spec.
    pub fn check_instance(&self, inst: &TimeSeriesInstance) -> std::result::Result<(), String> {
        let (l, h) = inst.values.dim();
        if l != self.length || h != self.channels {
            return Err(format!(
                "shape mismatch: got {l}x{h}, domain declares {}x{}",
                self.length, self.channels
            ));
        }
        if let Some(pos) = inst.values.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite value at flat index {pos}"));
        }
        if inst.labels.is_empty() {
            return Err("instance has no labels".into());
        }
        for label in &inst.labels {
            if self.label(label).is_none() {
                return Err(format!("unknown label `{label}`"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<TimeSeriesInstance>,
    pub test: Vec<TimeSeriesInstance>,
    /// Fraction of the original training set retained.
    pub fraction: f64,
}

impl CorpusSplit {
    pub fn new(train: Vec<TimeSeriesInstance>, test: Vec<TimeSeriesInstance>) -> Self {
        Self {
            train,
            test,
            fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub split: CorpusSplit,
}

/// Domains in manifest order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub domains: Vec<DomainData>,
}

impl Corpus {
    pub fn get(&self, name: &str) -> Option<&DomainData> {
        self.domains.iter().find(|d| d.spec.name == name)
    }

    pub fn specs(&self) -> Vec<DomainSpec> {
        self.domains.iter().map(|d| d.spec.clone()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.spec.name.clone()).collect()
    }

    /// Copy with every instance z-scored.
    pub fn normalized(&self) -> Corpus {
        Corpus {
            domains: self
                .domains
                .iter()
                .map(|d| DomainData {
                    spec: d.spec.clone(),
                    split: CorpusSplit {
                        train: d.split.train.iter().map(normalize).collect(),
                        test: d.split.test.iter().map(normalize).collect(),
                        fraction: d.split.fraction,
                    },
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    domains: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    #[serde(flatten)]
    spec: DomainSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_count: Option<usize>,
}

/// Load and validate a corpus directory.
pub fn load_corpus(root: impl AsRef<Path>) -> Result<Corpus> {
    let root = root.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Config(format!(
            "missing manifest {}",
            manifest_path.display()
        )));
    }
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|source| Error::Json {
        path: manifest_path.clone(),
        source,
    })?;
    if manifest.domains.is_empty() {
        return Err(Error::Config("manifest lists no domains".into()));
    }
    let mut seen = HashSet::new();
    let mut domains = Vec::with_capacity(manifest.domains.len());
    for entry in manifest.domains {
        let spec = entry.spec;
        spec.validate()?;
        if !seen.insert(spec.name.clone()) {
            return Err(Error::Config(format!("duplicate domain `{}`", spec.name)));
        }
        let dir = root.join(&spec.name);
        let train = read_instances(&dir.join("train.csv"), &spec)?;
        let test = read_instances(&dir.join("test.csv"), &spec)?;
        for (declared, actual, which) in [
            (entry.train_count, train.len(), "train"),
            (entry.test_count, test.len(), "test"),
        ] {
            if let Some(n) = declared {
                if n != actual {
                    return Err(Error::Config(format!(
                        "domain `{}`: manifest declares {n} {which} instances, found {actual}",
                        spec.name
                    )));
                }
            }
        }
        let train_ids: HashSet<&str> = train.iter().map(|i| i.id.as_str()).collect();
        if let Some(dup) = test.iter().find(|i| train_ids.contains(i.id.as_str())) {
            return Err(Error::Config(format!(
                "domain `{}`: instance `{}` appears in both train and test",
                spec.name, dup.id
            )));
        }
        domains.push(DomainData {
            spec,
            split: CorpusSplit::new(train, test),
        });
    }
    Ok(Corpus { domains })
}

fn read_instances(path: &Path, spec: &DomainSpec) -> Result<Vec<TimeSeriesInstance>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (index, record) in reader.records().enumerate() {
        let bad = |reason: String| Error::Instance {
            file: path.to_path_buf(),
            index,
            reason,
        };
        let record = record.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        if record.len() < 3 {
            return Err(bad(format!("expected at least 3 fields, got {}", record.len())));
        }
        let id = record[0].to_string();
        if !ids.insert(id.clone()) {
            return Err(bad(format!("duplicate instance id `{id}`")));
        }
        let labels: Vec<String> = record[1]
            .split('|')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let context = parse_context(&record[2]).map_err(bad)?;
        let n_values = record.len() - 3;
        let mut values = Vec::with_capacity(n_values);
        for (k, field) in record.iter().skip(3).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("value {k} `{field}` is not a number")))?;
            values.push(v);
        }
        if n_values != spec.length * spec.channels {
            let h = if spec.length > 0 && n_values % spec.length == 0 {
                format!(" (looks like {} channels)", n_values / spec.length)
            } else {
                String::new()
            };
            return Err(bad(format!(
                "shape mismatch: {n_values} values, domain declares {}x{}{h}",
                spec.length, spec.channels
            )));
        }
        let values = Array2::from_shape_vec((spec.length, spec.channels), values)
            .expect("length checked above");
        let inst = TimeSeriesInstance {
            id,
            domain: spec.name.clone(),
            values,
            labels,
            context,
        };
        spec.check_instance(&inst).map_err(bad)?;
        out.push(inst);
    }
    Ok(out)
}

fn parse_context(field: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for pair in field.split(';').filter(|s| !s.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("context entry `{pair}` is not key=value"))?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Write a corpus in the format read by [`load_corpus`].
pub fn write_corpus(corpus: &Corpus, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = Manifest {
        domains: corpus
            .domains
            .iter()
            .map(|d| ManifestEntry {
                spec: d.spec.clone(),
                train_count: Some(d.split.train.len()),
                test_count: Some(d.split.test.len()),
            })
            .collect(),
    };
    let path = root.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for d in &corpus.domains {
        let dir = root.join(&d.spec.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_instances(&dir.join("train.csv"), &d.split.train)?;
        write_instances(&dir.join("test.csv"), &d.split.test)?;
    }
    Ok(())
}

fn write_instances(path: &Path, instances: &[TimeSeriesInstance]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    for inst in instances {
        let mut row = Vec::with_capacity(3 + inst.values.len());
        row.push(inst.id.clone());
        row.push(inst.labels.join("|"));
        row.push(
            inst.context
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";"),
        );
        row.extend(inst.values.iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Per-channel z-score with the population standard deviation. Constant
/// channels become all zeros.
pub fn normalize(instance: &TimeSeriesInstance) -> TimeSeriesInstance {
    let mut out = instance.clone();
    let n = out.values.nrows() as f64;
    for mut col in out.values.columns_mut() {
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - mean) / std);
        }
    }
    out
}

/// Stratified (by first label) subsample of the training set.
///
/// Returns exactly `ceil(fraction * n)` instances in their original order.
pub fn subset_train(split: &CorpusSplit, fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let keep = stratified_indices(&split.train, fraction, seed, "subset-train");
    Ok(CorpusSplit {
        train: keep.into_iter().map(|i| split.train[i].clone()).collect(),
        test: split.test.clone(),
        fraction: split.fraction * fraction,
    })
}

/// Number of items kept when subsampling `n` items at `fraction`.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    // Guard against 0.1 * 100 = 10.000000000000002 rounding up to 11.
    let raw = fraction * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Sorted indices of a stratified sample of `ceil(fraction * n)` items.
pub(crate) fn stratified_indices(
    items: &[TimeSeriesInstance],
    fraction: f64,
    seed: u64,
    stream: &str,
) -> Vec<usize> {
    let n = items.len();
    let target = subset_size(n, fraction);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in items.iter().enumerate() {
        groups.entry(inst.first_label()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();

    // Largest-remainder allocation of the target over classes.
    let mut alloc: Vec<usize> = groups
        .iter()
        .map(|g| (fraction * g.len() as f64 + 1e-9).floor() as usize)
        .collect();
    let mut remaining = target.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = fraction * groups[a].len() as f64 - alloc[a] as f64;
        let rb = fraction * groups[b].len() as f64 - alloc[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &g in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[g] < groups[g].len() {
            alloc[g] += 1;
            remaining -= 1;
        }
    }
    // Every class keeps at least one member when the target allows it.
    if target >= groups.len() {
        for g in 0..groups.len() {
            if alloc[g] == 0 {
                let donor = (0..groups.len()).max_by_key(|&d| (alloc[d], usize::MAX - d)).unwrap();
                if alloc[donor] > 1 {
                    alloc[donor] -= 1;
                    alloc[g] = 1;
                }
            }
        }
    }

    let mut rng = rng_for(seed, stream);
    let mut keep = Vec::with_capacity(target);
    for (g, members) in groups.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        keep.extend_from_slice(&shuffled[..alloc[g]]);
    }
    keep.sort_unstable();
    keep
}

/// Waveform families for synthetic domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Waveform {
    Sine,
    Square,
    Sawtooth,
    NoiseBurst,
}

impl Waveform {
    pub fn id(self) -> &'static str {
        match self {
            Waveform::Sine => "sine",
            Waveform::Square => "square",
            Waveform::Sawtooth => "sawtooth",
            Waveform::NoiseBurst => "noise-burst",
        }
    }

    pub fn sentence(self) -> &'static str {
        match self {
            Waveform::Sine => "the signal is a sine wave",
            Waveform::Square => "the signal is a square wave",
            Waveform::Sawtooth => "the signal is a sawtooth wave",
            Waveform::NoiseBurst => "the signal is a noise burst",
        }
    }

    /// Periodic waveforms evaluated at phase angle `theta` (radians).
    fn periodic(self, theta: f64) -> f64 {
        match self {
            Waveform::Sine => theta.sin(),
            Waveform::Square => {
                if theta.sin() >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Waveform::Sawtooth => {
                let cycles = theta / (2.0 * PI);
                2.0 * (cycles - cycles.floor()) - 1.0
            }
            Waveform::NoiseBurst => 0.0,
        }
    }
}

/// Recipe for a synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub classes: Vec<Waveform>,
    /// Cycles per window, sampled uniformly per instance and channel.
    pub freq_range: (f64, f64),
    pub noise: f64,
    pub length: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub codebook_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_true")]
    pub random_phase: bool,
    /// Share of instances that superimpose two classes and carry both labels.
    #[serde(default)]
    pub multi_label_fraction: f64,
    #[serde(default)]
    pub with_context: bool,
    #[serde(default)]
    pub task_description: Option<String>,
}

fn default_true() -> bool {
    true
}

impl SyntheticSpec {
    pub fn new(name: &str, classes: &[Waveform]) -> Self {
        Self {
            name: name.to_string(),
            classes: classes.to_vec(),
            freq_range: (2.5, 3.5),
            noise: 0.1,
            length: 64,
            channels: 1,
            patch_size: 4,
            codebook_size: 32,
            train_per_class: 200,
            test_per_class: 50,
            random_phase: true,
            multi_label_fraction: 0.0,
            with_context: false,
            task_description: None,
        }
    }

    pub fn domain_spec(&self) -> DomainSpec {
        let mut classes = self.classes.clone();
        classes.sort();
        let task = self.task_description.clone().unwrap_or_else(|| {
            format!(
                "classify the waveform recorded by the {} sensor from its {} channel readings.",
                self.name.replace(['-', '_'], " "),
                self.channels
            )
        });
        DomainSpec {
            name: self.name.clone(),
            channels: self.channels,
            length: self.length,
            patch_size: self.patch_size,
            codebook_size: self.codebook_size,
            token_budget: self.length / self.patch_size.max(1),
            task_description: task,
            labels: classes
                .iter()
                .map(|w| LabelDef {
                    id: w.id().to_string(),
                    text: w.sentence().to_string(),
                })
                .collect(),
            context_schema: if self.with_context {
                vec!["gain".into(), "site".into()]
            } else {
                Vec::new()
            },
        }
    }
}

/// Generate a synthetic domain: class waveforms with random phase and
/// frequency per channel, plus Gaussian noise.
pub fn generate_synthetic_domain(spec: &SyntheticSpec, seed: u64) -> Result<DomainData> {
    let distinct: BTreeSet<Waveform> = spec.classes.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Argument(format!(
            "synthetic domain `{}` needs at least 2 distinct classes",
            spec.name
        )));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Argument("noise level must be non-negative".into()));
    }
    let (f_lo, f_hi) = spec.freq_range;
    if !(f_lo > 0.0 && f_hi >= f_lo) {
        return Err(Error::Argument(format!(
            "invalid frequency range ({f_lo}, {f_hi})"
        )));
    }
    if !(0.0..=1.0).contains(&spec.multi_label_fraction) {
        return Err(Error::Argument("multi_label_fraction must lie in [0, 1]".into()));
    }
    let domain = spec.domain_spec();
    domain.validate()?;
    let classes: Vec<Waveform> = distinct.into_iter().collect();
    let mut rng = rng_for(seed, &format!("synthetic/{}", spec.name));

    let make = |part: &str, per_class: usize, rng: &mut crate::seed::Rng| {
        let mut out = Vec::with_capacity(per_class * classes.len());
        for (ci, &class) in classes.iter().enumerate() {
            for _ in 0..per_class {
                let mut members = vec![class];
                if spec.multi_label_fraction > 0.0 && rng.random::<f64>() < spec.multi_label_fraction {
                    let other = classes[(ci + 1 + rng.random_range(0..classes.len() - 1)) % classes.len()];
                    members.push(other);
                    members.sort();
                }
                let values = synth_values(spec, &members, rng);
                let context = if spec.with_context {
                    let gain = ["low", "high"][rng.random_range(0..2)];
                    let site = format!("s{}", rng.random_range(1..4));
                    vec![("gain".to_string(), gain.to_string()), ("site".to_string(), site)]
                } else {
                    Vec::new()
                };
                out.push((members, values, context));
            }
        }
        out.shuffle(rng);
        out.into_iter()
            .enumerate()
            .map(|(i, (members, values, context))| TimeSeriesInstance {
                id: format!("{}-{part}-{i:05}", spec.name),
                domain: spec.name.clone(),
                values,
                labels: members.iter().map(|w| w.id().to_string()).collect(),
                context,
            })
            .collect::<Vec<_>>()
    };
    let train = make("train", spec.train_per_class, &mut rng);
    let test = make("test", spec.test_per_class, &mut rng);
    Ok(DomainData {
        spec: domain,
        split: CorpusSplit::new(train, test),
    })
}

fn synth_values(spec: &SyntheticSpec, members: &[Waveform], rng: &mut crate::seed::Rng) -> Array2<f64> {
    let l = spec.length;
    let mut values = Array2::zeros((l, spec.channels));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for h in 0..spec.channels {
        for &wave in members {
            let freq = if spec.freq_range.1 > spec.freq_range.0 {
                rng.random_range(spec.freq_range.0..spec.freq_range.1)
            } else {
                spec.freq_range.0
            };
            let phase = if spec.random_phase {
                rng.random_range(0.0..2.0 * PI)
            } else {
                0.0
            };
            if wave == Waveform::NoiseBurst {
                let width = (l / 4).max(1);
                let start = rng.random_range(0..=l - width);
                for t in start..start + width {
                    values[[t, h]] += unit.sample(rng);
                }
            } else {
                for t in 0..l {
                    let theta = 2.0 * PI * freq * t as f64 / l as f64 + phase;
                    values[[t, h]] += wave.periodic(theta);
                }
            }
        }
        if spec.noise > 0.0 {
            for t in 0..l {
                values[[t, h]] += spec.noise * unit.sample(rng);
            }
        }
    }
    values
}

/// Generate several synthetic domains into one corpus.
pub fn generate_synthetic_corpus(specs: &[SyntheticSpec], seed: u64) -> Result<Corpus> {
    let mut names = HashSet::new();
    let mut domains = Vec::with_capacity(specs.len());
    for spec in specs {
        if !names.insert(spec.name.clone()) {
            return Err(Error::Argument(format!("duplicate domain `{}`", spec.name)));
        }
        domains.push(generate_synthetic_domain(spec, seed)?);
    }
    Ok(Corpus { domains })
}

/// Directory holding a domain's files inside a corpus root.
pub fn domain_dir(root: &Path, domain: &str) -> PathBuf {
    root.join(domain)
}
