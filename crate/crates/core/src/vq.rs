//! Time-series discretization with a vector-quantized autoencoder.
//!
//! An instance (`L x H`) is cut into `P = L / patch_size` non-overlapping
//! patches. A shared linear map (a 1-D convolution with kernel = stride =
//! patch size over all channels) embeds each patch, a stack of residual
//! dilated causal convolution blocks refines the patch sequence, and every
//! resulting vector `z_p` is replaced by its nearest codebook row. A mirrored
//! decoder maps the quantized sequence back to `L x H`.
//!
//! Training minimizes
//!
//! ```text
//! mse(x, x_hat) + mean_p |sg(z_p) - e_k|^2 + beta * mean_p |z_p - sg(e_k)|^2
//! ```
//!
//! with the straight-through estimator carrying decoder gradients past the
//! argmin. The middle term is reported but carries no gradient: codebook rows
//! are re-estimated by exponential moving averages of their assigned encoder
//! outputs instead.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{DomainSpec, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::nn::{self, CausalConv1d, Linear, NamedTensor, Param, Parameters};
use crate::optim::AdamW;
use crate::seed::{rng_for, Rng};

/// Tokenizer hyperparameters. The codebook size comes from the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub d_code: usize,
    /// Width of the convolution inside each residual block.
    pub hidden: usize,
    pub kernel_size: usize,
    /// One residual block per entry, in both encoder and decoder.
    pub dilations: Vec<usize>,
    pub beta: f64,
    pub decay: f64,
    pub laplace_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub revive_dead_codes: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            d_code: 64,
            hidden: 64,
            kernel_size: 3,
            dilations: vec![1, 2, 4],
            beta: 0.25,
            decay: 0.99,
            laplace_eps: 1e-5,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            revive_dead_codes: true,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tokenizer: {m}")));
        if self.d_code == 0 || self.hidden == 0 || self.kernel_size == 0 {
            return bad("d_code, hidden and kernel_size must be positive");
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return bad("dilations must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.decay >= 0.0 && self.decay < 1.0) {
            return bad("decay must lie in [0, 1)");
        }
        if !(self.laplace_eps > 0.0) {
            return bad("laplace_eps must be positive");
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive");
        }
        Ok(())
    }
}

/// Per-domain codebook with exponential-moving-average statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    #[serde(with = "matrix_serde")]
    pub vectors: Array2<f64>,
    pub ema_counts: Vec<f64>,
    #[serde(with = "matrix_serde")]
    pub ema_sums: Array2<f64>,
    pub usage_counts: Vec<u64>,
    pub decay: f64,
    pub laplace_eps: f64,
}

impl Codebook {
    /// Rows drawn from `N(0, 1/d)`.
    pub fn new(size: usize, dim: usize, decay: f64, laplace_eps: f64, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std");
        let vectors = Array2::from_shape_fn((size, dim), |_| dist.sample(rng));
        Self::from_vectors(vectors, decay, laplace_eps)
    }

    /// Codebook whose EMA state starts as one pseudo-observation per row.
    pub fn from_vectors(vectors: Array2<f64>, decay: f64, laplace_eps: f64) -> Self {
        let k = vectors.nrows();
        Self {
            ema_sums: vectors.clone(),
            ema_counts: vec![1.0; k],
            usage_counts: vec![0; k],
            vectors,
            decay,
            laplace_eps,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Laplace-smoothed counts: `(c_k + eps) / (N + K eps) * N`.
    pub fn smoothed_counts(&self) -> Vec<f64> {
        let total: f64 = self.ema_counts.iter().sum();
        let k = self.len() as f64;
        self.ema_counts
            .iter()
            .map(|c| (c + self.laplace_eps) / (total + k * self.laplace_eps) * total)
            .collect()
    }

    /// Recompute every row as `ema_sums[k] / smoothed(ema_counts)[k]`.
    pub fn refresh_vectors(&mut self) {
        let smoothed = self.smoothed_counts();
        for (k, n) in smoothed.into_iter().enumerate() {
            let row = &self.ema_sums.row(k) / n;
            self.vectors.row_mut(k).assign(&row);
        }
    }

    /// EMA re-estimation from a batch of encoder outputs (`rows x d`) and
    /// their assigned codes.
    pub fn ema_update(&mut self, z: &ArrayView2<f64>, codes: &[usize]) {
        assert_eq!(z.nrows(), codes.len(), "one code per encoder output");
        let k = self.len();
        let mut counts = vec![0u64; k];
        let mut sums = Array2::<f64>::zeros((k, self.dim()));
        for (row, &code) in z.rows().into_iter().zip(codes) {
            counts[code] += 1;
            let mut acc = sums.row_mut(code);
            acc += &row;
        }
        let g = self.decay;
        for code in 0..k {
            self.ema_counts[code] = g * self.ema_counts[code] + (1.0 - g) * counts[code] as f64;
            let updated = &self.ema_sums.row(code) * g + &sums.row(code) * (1.0 - g);
            self.ema_sums.row_mut(code).assign(&updated);
            self.usage_counts[code] += counts[code];
        }
        self.refresh_vectors();
    }

    /// Replace a row with `z`, restarting its statistics at one observation.
    pub fn revive(&mut self, code: usize, z: &ArrayView1<f64>) {
        self.ema_counts[code] = 1.0;
        self.ema_sums.row_mut(code).assign(z);
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.fill(0);
    }
}

/// Nearest codebook row by squared Euclidean distance; ties go to the
/// lowest index.
pub fn quantize<'a>(z: &ArrayView1<f64>, codebook: &'a Codebook) -> (usize, ArrayView1<'a, f64>) {
    assert!(!codebook.is_empty(), "empty codebook");
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (k, row) in codebook.vectors.rows().into_iter().enumerate() {
        let mut dist = 0.0;
        for (a, b) in z.iter().zip(row.iter()) {
            let d = a - b;
            dist += d * d;
        }
        if dist < best_dist {
            best_dist = dist;
            best = k;
        }
    }
    (best, codebook.vectors.row(best))
}

/// Quantize every row of `z`.
pub fn quantize_rows(z: &Array2<f64>, codebook: &Codebook) -> (Vec<usize>, Array2<f64>) {
    let mut codes = Vec::with_capacity(z.nrows());
    let mut zq = Array2::zeros(z.raw_dim());
    for (p, row) in z.rows().into_iter().enumerate() {
        let (k, e) = quantize(&row, codebook);
        codes.push(k);
        zq.row_mut(p).assign(&e);
    }
    (codes, zq)
}

/// Residual block `x + proj(relu(conv(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnBlock {
    pub conv: CausalConv1d,
    pub proj: Linear,
}

struct BlockTrace {
    cols: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl TcnBlock {
    fn new(dim: usize, hidden: usize, kernel: usize, dilation: usize, rng: &mut Rng) -> Self {
        Self {
            conv: CausalConv1d::new(dim, hidden, kernel, dilation, rng),
            proj: Linear::new(hidden, dim, (1.0 / hidden as f64).sqrt() * 0.5, rng),
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, BlockTrace) {
        let (pre, cols) = self.conv.forward(x);
        let act = nn::relu(&pre);
        let out = x + &self.proj.forward(&act.view());
        (out, BlockTrace { cols, pre, act })
    }

    fn backward(&mut self, trace: &BlockTrace, dout: &Array2<f64>) -> Array2<f64> {
        let dact = self.proj.backward(&trace.act.view(), dout);
        let dpre = nn::relu_backward(&trace.pre, &dact);
        dout + &self.conv.backward(&trace.cols, &dpre)
    }
}

/// Patch embedding, convolutional encoder/decoder and patch reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct VqEncoderDecoder {
    pub patch_size: usize,
    pub channels: usize,
    pub d_code: usize,
    pub patch_embed: Linear,
    pub encoder: Vec<TcnBlock>,
    pub decoder: Vec<TcnBlock>,
    pub unpatch: Linear,
}

/// Intermediate values of one instance's forward pass.
pub struct VqTrace {
    patches: Array2<f64>,
    enc: Vec<(Array2<f64>, BlockTrace)>,
    dec: Vec<(Array2<f64>, BlockTrace)>,
    dec_out: Array2<f64>,
    /// Encoder outputs `P x d`.
    pub z: Array2<f64>,
    pub codes: Vec<usize>,
    pub zq: Array2<f64>,
    pub reconstruction: Array2<f64>,
}

impl VqEncoderDecoder {
    pub fn new(patch_size: usize, channels: usize, config: &VqConfig, rng: &mut Rng) -> Self {
        let d = config.d_code;
        let patch_dim = patch_size * channels;
        let patch_embed = Linear::new(patch_dim, d, (1.0 / patch_dim as f64).sqrt(), rng);
        let encoder = config
            .dilations
            .iter()
            .map(|&dil| TcnBlock::new(d, config.hidden, config.kernel_size, dil, rng))
            .collect();
        let decoder = config
            .dilations
            .iter()
            .map(|&dil| TcnBlock::new(d, config.hidden, config.kernel_size, dil, rng))
            .collect();
        let unpatch = Linear::new(d, patch_dim, (1.0 / d as f64).sqrt(), rng);
        Self {
            patch_size,
            channels,
            d_code: d,
            patch_embed,
            encoder,
            decoder,
            unpatch,
        }
    }

    pub fn for_domain(spec: &DomainSpec, config: &VqConfig, rng: &mut Rng) -> Self {
        Self::new(spec.patch_size, spec.channels, config, rng)
    }

    /// How many patches back (including its own) an encoder output can see.
    pub fn encoder_receptive_field(&self) -> usize {
        1 + self
            .encoder
            .iter()
            .map(|b| b.conv.receptive_field() - 1)
            .sum::<usize>()
    }

    /// Reshape `L x H` values into `P x (patch_size * H)` patch rows.
    pub fn patch_matrix(&self, values: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let (l, h) = values.dim();
        if h != self.channels {
            return Err(Error::Config(format!(
                "tokenizer expects {} channels, got {h}",
                self.channels
            )));
        }
        if l % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "length {l} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        let flat: Vec<f64> = values.iter().copied().collect();
        Ok(Array2::from_shape_vec((l / self.patch_size, self.patch_size * h), flat)
            .expect("divisibility checked"))
    }

    /// Patch vectors before the convolutional encoder: one per patch, each a
    /// function of its own time steps only.
    pub fn patch_embed(&self, instance: &TimeSeriesInstance) -> Result<Array2<f64>> {
        let patches = self.patch_matrix(&instance.values.view())?;
        Ok(self.patch_embed.forward(&patches.view()))
    }

    /// Encoder outputs `z` (`P x d_code`).
    pub fn encode(&self, values: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let patches = self.patch_matrix(values)?;
        let mut h = self.patch_embed.forward(&patches.view());
        for block in &self.encoder {
            h = block.forward(&h.view()).0;
        }
        Ok(h)
    }

    /// Decode a `P x d_code` sequence back to `L x H`.
    pub fn decode(&self, zq: &ArrayView2<f64>) -> Array2<f64> {
        let mut h = zq.to_owned();
        for block in &self.decoder {
            h = block.forward(&h.view()).0;
        }
        let out = self.unpatch.forward(&h.view());
        let p = out.nrows();
        out.into_shape_with_order((p * self.patch_size, self.channels))
            .expect("patch layout")
    }

    /// Full forward pass keeping everything `backward` needs.
    pub fn trace(&self, values: &ArrayView2<f64>, codebook: &Codebook) -> Result<VqTrace> {
        let patches = self.patch_matrix(values)?;
        let mut h = self.patch_embed.forward(&patches.view());
        let mut enc = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (out, t) = block.forward(&h.view());
            enc.push((h, t));
            h = out;
        }
        let z = h;
        let (codes, zq) = quantize_rows(&z, codebook);
        let mut h = zq.clone();
        let mut dec = Vec::with_capacity(self.decoder.len());
        for block in &self.decoder {
            let (out, t) = block.forward(&h.view());
            dec.push((h, t));
            h = out;
        }
        let dec_out = h;
        let flat = self.unpatch.forward(&dec_out.view());
        let p = flat.nrows();
        let reconstruction = flat
            .into_shape_with_order((p * self.patch_size, self.channels))
            .expect("patch layout");
        Ok(VqTrace {
            patches,
            enc,
            dec,
            dec_out,
            z,
            codes,
            zq,
            reconstruction,
        })
    }

    /// Backpropagate `scale * total` for one traced instance, accumulating
    /// parameter gradients. The quantizer is bypassed with the
    /// straight-through estimator.
    pub fn backward(&mut self, trace: &VqTrace, values: &ArrayView2<f64>, beta: f64, scale: f64) {
        let n = values.len() as f64;
        let drec = (&trace.reconstruction - values) * (2.0 * scale / n);
        let p = trace.z.nrows();
        let dflat = drec
            .into_shape_with_order((p, self.patch_size * self.channels))
            .expect("patch layout");
        let mut dh = self.unpatch.backward(&trace.dec_out.view(), &dflat);
        for (block, (_, t)) in self.decoder.iter_mut().zip(&trace.dec).rev() {
            dh = block.backward(t, &dh);
        }
        // Straight-through: the gradient at z_q is handed to z unchanged,
        // plus the commitment pull toward the selected rows.
        let dcommit = (&trace.z - &trace.zq) * (2.0 * beta * scale / p as f64);
        let mut dz = dh + dcommit;
        for (block, (_, t)) in self.encoder.iter_mut().zip(&trace.enc).rev() {
            dz = block.backward(t, &dz);
        }
        self.patch_embed.backward(&trace.patches.view(), &dz);
    }
}

impl Parameters for VqEncoderDecoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.patch_embed.visit("patch_embed", f);
        for (i, b) in self.encoder.iter().enumerate() {
            b.conv.visit(&format!("encoder.{i}.conv"), f);
            b.proj.visit(&format!("encoder.{i}.proj"), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.conv.visit(&format!("decoder.{i}.conv"), f);
            b.proj.visit(&format!("decoder.{i}.proj"), f);
        }
        self.unpatch.visit("unpatch", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.patch_embed.visit_mut("patch_embed", f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.conv.visit_mut(&format!("encoder.{i}.conv"), f);
            b.proj.visit_mut(&format!("encoder.{i}.proj"), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.conv.visit_mut(&format!("decoder.{i}.conv"), f);
            b.proj.visit_mut(&format!("decoder.{i}.proj"), f);
        }
        self.unpatch.visit_mut("unpatch", f);
    }
}

/// Loss terms of one forward pass (or their average over a batch).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VqLossReport {
    pub reconstruction: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub beta: f64,
    pub total: f64,
}

impl VqLossReport {
    pub fn new(reconstruction: f64, codebook_term: f64, commitment_term: f64, beta: f64) -> Self {
        Self {
            reconstruction,
            codebook_term,
            commitment_term,
            beta,
            total: reconstruction + codebook_term + beta * commitment_term,
        }
    }

    fn from_trace(trace: &VqTrace, values: &ArrayView2<f64>, beta: f64) -> Self {
        let rec = (&trace.reconstruction - values).mapv(|v| v * v).mean().unwrap_or(0.0);
        let p = trace.z.nrows() as f64;
        let dist = (&trace.z - &trace.zq).mapv(|v| v * v).sum() / p;
        // Both terms share a forward value; only their gradient targets differ.
        Self::new(rec, dist, dist, beta)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    fn mean(reports: &[VqLossReport], beta: f64) -> Self {
        let n = reports.len().max(1) as f64;
        let rec = reports.iter().map(|r| r.reconstruction).sum::<f64>() / n;
        let cb = reports.iter().map(|r| r.codebook_term).sum::<f64>() / n;
        let cm = reports.iter().map(|r| r.commitment_term).sum::<f64>() / n;
        Self::new(rec, cb, cm, beta)
    }
}

/// Result of [`vq_forward`].
#[derive(Debug, Clone)]
pub struct VqOutput {
    pub reconstruction: Array2<f64>,
    pub codes: Vec<usize>,
    pub report: VqLossReport,
}

/// Reconstruct an instance through the quantized bottleneck and report the
/// loss terms.
pub fn vq_forward(
    instance: &TimeSeriesInstance,
    model: &VqEncoderDecoder,
    codebook: &Codebook,
    beta: f64,
) -> Result<VqOutput> {
    let values = instance.values.view();
    let trace = model.trace(&values, codebook)?;
    let report = VqLossReport::from_trace(&trace, &values, beta);
    if !report.is_finite() {
        return Err(Error::Divergence { phase: "tokenizer", step: 0 });
    }
    Ok(VqOutput {
        reconstruction: trace.reconstruction,
        codes: trace.codes,
        report,
    })
}

/// Statistics of one gradient-accumulation pass over a batch.
pub struct BatchPass {
    pub report: VqLossReport,
    /// Encoder outputs of every patch in the batch, stacked.
    pub z: Array2<f64>,
    pub codes: Vec<usize>,
}

/// Accumulate gradients of the batch-mean loss into `model`.
pub fn accumulate_gradients(
    model: &mut VqEncoderDecoder,
    batch: &[&TimeSeriesInstance],
    codebook: &Codebook,
    beta: f64,
) -> Result<BatchPass> {
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut reports = Vec::with_capacity(batch.len());
    let mut zs = Vec::with_capacity(batch.len());
    let mut codes = Vec::new();
    for inst in batch {
        let values = inst.values.view();
        let trace = model.trace(&values, codebook)?;
        reports.push(VqLossReport::from_trace(&trace, &values, beta));
        model.backward(&trace, &values, beta, scale);
        codes.extend_from_slice(&trace.codes);
        zs.push(trace.z);
    }
    let views: Vec<_> = zs.iter().map(|z| z.view()).collect();
    let z = ndarray::concatenate(Axis(0), &views).unwrap_or_else(|_| Array2::zeros((0, model.d_code)));
    Ok(BatchPass {
        report: VqLossReport::mean(&reports, beta),
        z,
        codes,
    })
}

/// A trained tokenizer bound to one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub domain: String,
    pub spec_hash: String,
    pub config: VqConfig,
    pub seed: u64,
    pub model: VqEncoderDecoder,
    pub codebook: Codebook,
}

impl Tokenizer {
    /// Untrained tokenizer with freshly initialized weights and codebook.
    pub fn init(spec: &DomainSpec, config: &VqConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let mut rng = rng_for(seed, &format!("vq/init/{}", spec.name));
        let model = VqEncoderDecoder::for_domain(spec, config, &mut rng);
        let codebook = Codebook::new(
            spec.codebook_size,
            config.d_code,
            config.decay,
            config.laplace_eps,
            &mut rng,
        );
        Ok(Self {
            domain: spec.name.clone(),
            spec_hash: spec.hash(),
            config: config.clone(),
            seed,
            model,
            codebook,
        })
    }

    /// Code sequence of length `P`.
    pub fn tokenize(&self, instance: &TimeSeriesInstance) -> Result<Vec<usize>> {
        tokenize(instance, &self.model, &self.codebook)
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.len()
    }

    /// Mean reconstruction MSE over `instances`.
    pub fn reconstruction_mse(&self, instances: &[TimeSeriesInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for inst in instances {
            total += vq_forward(inst, &self.model, &self.codebook, self.config.beta)?
                .report
                .reconstruction;
        }
        Ok(total / instances.len() as f64)
    }

    pub fn check_domain(&self, spec: &DomainSpec) -> Result<()> {
        if self.domain != spec.name || self.spec_hash != spec.hash() {
            return Err(Error::Incompatible(format!(
                "tokenizer for `{}` was trained against a different domain spec than `{}`",
                self.domain, spec.name
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<String> {
        let file = TokenizerFile {
            format: TOKENIZER_FORMAT.to_string(),
            domain: self.domain.clone(),
            domain_spec_hash: self.spec_hash.clone(),
            patch_size: self.model.patch_size,
            channels: self.model.channels,
            config: self.config.clone(),
            seed: self.seed,
            tensors: nn::export_params(&self.model),
            codebook: self.codebook.clone(),
        };
        checkpoint::write_json(path, &file)
    }

    /// Load a checkpoint and verify it belongs to `spec`.
    pub fn load(path: &std::path::Path, spec: &DomainSpec) -> Result<Self> {
        let file: TokenizerFile = checkpoint::read_json(path)?;
        if file.format != TOKENIZER_FORMAT {
            return Err(Error::Incompatible(format!(
                "{}: unknown tokenizer format `{}`",
                path.display(),
                file.format
            )));
        }
        if file.domain_spec_hash != spec.hash() || file.domain != spec.name {
            return Err(Error::Incompatible(format!(
                "{}: domain spec hash does not match domain `{}`",
                path.display(),
                spec.name
            )));
        }
        file.config.validate()?;
        let mut rng = rng_for(file.seed, "vq/load");
        let mut model = VqEncoderDecoder::new(file.patch_size, file.channels, &file.config, &mut rng);
        nn::import_params(&mut model, &file.tensors)?;
        let cb = &file.codebook;
        if cb.vectors.dim() != (spec.codebook_size, file.config.d_code)
            || cb.ema_sums.dim() != cb.vectors.dim()
            || cb.ema_counts.len() != cb.len()
            || cb.usage_counts.len() != cb.len()
            || cb.vectors.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Incompatible(format!(
                "{}: malformed codebook",
                path.display()
            )));
        }
        Ok(Self {
            domain: file.domain,
            spec_hash: file.domain_spec_hash,
            config: file.config,
            seed: file.seed,
            model,
            codebook: file.codebook,
        })
    }
}

const TOKENIZER_FORMAT: &str = "tsgen-vq-tokenizer/1";

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    format: String,
    domain: String,
    domain_spec_hash: String,
    patch_size: usize,
    channels: usize,
    config: VqConfig,
    seed: u64,
    tensors: Vec<NamedTensor>,
    codebook: Codebook,
}

/// `codes[p] = quantize(encoder output p)`.
pub fn tokenize(
    instance: &TimeSeriesInstance,
    model: &VqEncoderDecoder,
    codebook: &Codebook,
) -> Result<Vec<usize>> {
    let z = model.encode(&instance.values.view())?;
    Ok(z.rows().into_iter().map(|row| quantize(&row, codebook).0).collect())
}

/// Trained tokenizer plus per-epoch loss history.
#[derive(Debug, Clone)]
pub struct TokenizerRun {
    pub tokenizer: Tokenizer,
    pub history: Vec<VqLossReport>,
}

/// Epoch-level driver for tokenizer training. On divergence the trainer rolls
/// back to the state at the start of the failing epoch, so
/// [`TokenizerTrainer::tokenizer`] always holds finite parameters.
pub struct TokenizerTrainer {
    tokenizer: Tokenizer,
    optimizer: AdamW,
    rng: Rng,
    step: usize,
    pub history: Vec<VqLossReport>,
}

impl TokenizerTrainer {
    pub fn new(spec: &DomainSpec, config: &VqConfig, seed: u64) -> Result<Self> {
        let tokenizer = Tokenizer::init(spec, config, seed)?;
        Ok(Self {
            tokenizer,
            optimizer: AdamW::new(0.0),
            rng: rng_for(seed, &format!("vq/train/{}", spec.name)),
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn into_run(self) -> TokenizerRun {
        TokenizerRun {
            tokenizer: self.tokenizer,
            history: self.history,
        }
    }

    /// One pass over `train` in shuffled mini-batches.
    pub fn run_epoch(&mut self, train: &[TimeSeriesInstance]) -> Result<VqLossReport> {
        let snapshot = (self.tokenizer.clone(), self.optimizer.clone());
        match self.epoch_inner(train) {
            Ok(report) => {
                self.history.push(report);
                Ok(report)
            }
            Err(e) => {
                self.tokenizer = snapshot.0;
                self.optimizer = snapshot.1;
                Err(e)
            }
        }
    }

    fn epoch_inner(&mut self, train: &[TimeSeriesInstance]) -> Result<VqLossReport> {
        let cfg = self.tokenizer.config.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let k = self.tokenizer.codebook.len();
        let mut epoch_usage = vec![0u64; k];
        let mut reports = Vec::new();
        let mut weights = Vec::new();
        let mut last_z = Array2::zeros((0, cfg.d_code));
        for chunk in order.chunks(cfg.batch_size) {
            self.step += 1;
            let batch: Vec<&TimeSeriesInstance> = chunk.iter().map(|&i| &train[i]).collect();
            let tok = &mut self.tokenizer;
            tok.model.zero_grad();
            let pass = accumulate_gradients(&mut tok.model, &batch, &tok.codebook, cfg.beta)?;
            if !pass.report.is_finite() || !tok.model.grad_norm().is_finite() {
                return Err(Error::Divergence {
                    phase: "tokenizer",
                    step: self.step,
                });
            }
            self.optimizer.step(&mut tok.model, cfg.learning_rate);
            tok.codebook.ema_update(&pass.z.view(), &pass.codes);
            for &c in &pass.codes {
                epoch_usage[c] += 1;
            }
            reports.push(pass.report);
            weights.push(batch.len() as f64);
            last_z = pass.z;
        }
        if cfg.revive_dead_codes && last_z.nrows() > 0 {
            let dead: Vec<usize> = (0..k).filter(|&c| epoch_usage[c] == 0).collect();
            if !dead.is_empty() {
                let cb = &mut self.tokenizer.codebook;
                for c in dead {
                    let pick = self.rng.random_range(0..last_z.nrows());
                    cb.revive(c, &last_z.row(pick));
                }
                cb.refresh_vectors();
            }
        }
        let total_w: f64 = weights.iter().sum::<f64>().max(1.0);
        let avg = |f: fn(&VqLossReport) -> f64| {
            reports.iter().zip(&weights).map(|(r, w)| f(r) * w).sum::<f64>() / total_w
        };
        Ok(VqLossReport::new(
            avg(|r| r.reconstruction),
            avg(|r| r.codebook_term),
            avg(|r| r.commitment_term),
            cfg.beta,
        ))
    }
}

/// Train a domain tokenizer on (normalized) training instances.
pub fn train_tokenizer(
    spec: &DomainSpec,
    train: &[TimeSeriesInstance],
    config: &VqConfig,
    seed: u64,
) -> Result<TokenizerRun> {
    if train.is_empty() {
        return Err(Error::Argument(format!(
            "domain `{}` has no training instances",
            spec.name
        )));
    }
    for (i, inst) in train.iter().enumerate() {
        spec.check_instance(inst)
            .map_err(|reason| Error::Argument(format!("training instance {i}: {reason}")))?;
    }
    let mut trainer = TokenizerTrainer::new(spec, config, seed)?;
    for _ in 0..config.epochs {
        trainer.run_epoch(train)?;
    }
    Ok(trainer.into_run())
}

/// Mean of each codebook row's squared norm; handy for sanity checks.
pub fn codebook_spread(codebook: &Codebook) -> f64 {
    let norms: Array1<f64> = codebook
        .vectors
        .rows()
        .into_iter()
        .map(|r| r.dot(&r))
        .collect();
    norms.mean().unwrap_or(0.0)
}

mod matrix_serde {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Matrix {
        shape: [usize; 2],
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        Matrix {
            shape: [m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let m = Matrix::deserialize(d)?;
        Array2::from_shape_vec((m.shape[0], m.shape[1]), m.data).map_err(serde::de::Error::custom)
    }
}
