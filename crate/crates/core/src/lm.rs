//! Decoder-only transformer with a hybrid embedding front end.
//!
//! Text and special ids index a learned table. Time-series ids are resolved
//! to their (frozen) codebook row and mapped into the model width by the
//! alignment projector, an MLP with GELU between layers. Blocks are pre-norm:
//! `x + attn(ln(x))`, then `x + mlp(ln(x))`; a final layer norm feeds an
//! untied output head over the full vocabulary.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm, LayerNormCache, Linear, NamedTensor, Param, Parameters};
use crate::prompt::{PromptSequence, TokenId, Vocabulary, EOS};
use crate::seed::{rng_for, Rng};
use crate::vq::{Codebook, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_window: usize,
    pub dropout: f64,
    /// Projector widths from the codebook dimension up to `d_model`.
    pub projector_hidden: Vec<usize>,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            context_window: 512,
            dropout: 0.1,
            projector_hidden: vec![64, 128, 256],
        }
    }
}

impl LmConfig {
    pub fn validate(&self, d_code: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be positive".into());
        }
        if self.context_window < 2 {
            return bad("context_window must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        match (self.projector_hidden.first(), self.projector_hidden.last()) {
            (Some(&first), Some(&last)) => {
                if first != d_code {
                    return bad(format!(
                        "projector_hidden must start at the codebook dimension {d_code}, got {first}"
                    ));
                }
                if last != self.d_model {
                    return bad(format!(
                        "projector_hidden must end at d_model {}, got {last}",
                        self.d_model
                    ));
                }
                if self.projector_hidden.contains(&0) {
                    return bad("projector widths must be positive".into());
                }
            }
            _ => return bad("projector_hidden must not be empty".into()),
        }
        Ok(())
    }
}

/// Codebook rows addressable by time-series token id. Read-only input to the
/// model: nothing here receives gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookTable {
    first_ts: TokenId,
    rows: Array2<f64>,
    present: Vec<bool>,
}

impl CodebookTable {
    pub fn new(vocab: &Vocabulary, d_code: usize) -> Self {
        let n = vocab.size() - vocab.first_ts_id() as usize;
        Self {
            first_ts: vocab.first_ts_id(),
            rows: Array2::zeros((n, d_code)),
            present: vec![false; n],
        }
    }

    pub fn d_code(&self) -> usize {
        self.rows.ncols()
    }

    pub fn insert(&mut self, vocab: &Vocabulary, domain: &str, codebook: &Codebook) -> Result<()> {
        let range = vocab
            .ts_range(domain)
            .ok_or_else(|| Error::Vocabulary(format!("unknown domain `{domain}`")))?;
        if codebook.len() != range.size || codebook.dim() != self.d_code() {
            return Err(Error::Incompatible(format!(
                "codebook for `{domain}` is {}x{}, vocabulary expects {}x{}",
                codebook.len(),
                codebook.dim(),
                range.size,
                self.d_code()
            )));
        }
        let start = (range.start - self.first_ts) as usize;
        self.rows
            .slice_mut(s![start..start + range.size, ..])
            .assign(&codebook.vectors);
        self.present[start..start + range.size].fill(true);
        Ok(())
    }

    pub fn from_tokenizers(vocab: &Vocabulary, tokenizers: &[&Tokenizer]) -> Result<Self> {
        let d = tokenizers.first().map_or(0, |t| t.codebook.dim());
        let mut table = Self::new(vocab, d);
        for t in tokenizers {
            table.insert(vocab, &t.domain, &t.codebook)?;
        }
        Ok(table)
    }

    pub fn row(&self, id: TokenId) -> Result<ArrayView1<'_, f64>> {
        let idx = id.checked_sub(self.first_ts).map(|i| i as usize);
        match idx {
            Some(i) if i < self.present.len() && self.present[i] => Ok(self.rows.row(i)),
            Some(i) if i < self.present.len() => Err(Error::Vocabulary(format!(
                "time-series id {id} belongs to a domain without a loaded codebook"
            ))),
            _ => Err(Error::Vocabulary(format!(
                "id {id} is outside every time-series range"
            ))),
        }
    }

    /// Hex digest of the table contents.
    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.rows.iter().flat_map(|v| v.to_le_bytes()).collect();
        crate::seed::sha256_hex(&bytes)
    }
}

/// MLP from codebook space to model width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub layers: Vec<Linear>,
}

struct ProjectorTrace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Projector {
    fn new(widths: &[usize], rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], (1.0 / w[0] as f64).sqrt(), rng))
            .collect();
        Self { layers }
    }

    /// Set every layer to the identity map (square layers only).
    pub fn set_identity(&mut self) {
        for l in &mut self.layers {
            let n = l.input_dim();
            assert_eq!(n, l.output_dim(), "identity needs square layers");
            l.w.value = Array2::eye(n);
            l.b.value.fill(0.0);
        }
    }

    fn forward(&self, x: Array2<f64>) -> (Array2<f64>, ProjectorTrace) {
        let mut trace = ProjectorTrace {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&h.view());
            let next = if i + 1 < self.layers.len() {
                nn::gelu(&pre)
            } else {
                pre.clone()
            };
            trace.inputs.push(h);
            trace.pre.push(pre);
            h = next;
        }
        (h, trace)
    }

    fn backward(&mut self, trace: &ProjectorTrace, dy: Array2<f64>) {
        let n = self.layers.len();
        let mut d = dy;
        for i in (0..n).rev() {
            if i + 1 < n {
                d = nn::gelu_backward(&trace.pre[i], &d);
            }
            d = self.layers[i].backward(&trace.inputs[i].view(), &d);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

struct BlockTrace {
    ln1: LayerNormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Vec<Vec<f64>>>,
    ctx: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln2: LayerNormCache,
    b: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut Rng>,
}

impl Dropout<'_> {
    fn apply(&mut self, x: &mut Array2<f64>) -> Option<Array2<f64>> {
        let rng = self.rng.as_mut()?;
        if self.rate == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        *x *= &mask;
        Some(mask)
    }
}

fn masked(d: &Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => d * m,
        None => d.clone(),
    }
}

/// Causal multi-head attention over fused `T x 3d` projections. Row `i` only
/// ever reads rows `0..=i`.
fn attention(qkv: &Array2<f64>, heads: usize) -> (Array2<f64>, Vec<Vec<Vec<f64>>>) {
    let t = qkv.nrows();
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut head_probs = Vec::with_capacity(t);
        for i in 0..t {
            let qi = q.row(i);
            let mut row: Vec<f64> = (0..=i).map(|j| qi.dot(&k.row(j)) * scale).collect();
            nn::softmax_in_place(&mut row);
            let mut out = ctx.slice_mut(s![i, h * dh..(h + 1) * dh]);
            for (j, &p) in row.iter().enumerate() {
                out.scaled_add(p, &v.row(j));
            }
            head_probs.push(row);
        }
        probs.push(head_probs);
    }
    (ctx, probs)
}

fn attention_backward(qkv: &Array2<f64>, probs: &[Vec<Vec<f64>>], dctx: &Array2<f64>) -> Array2<f64> {
    let heads = probs.len();
    let t = qkv.nrows();
    let d = qkv.ncols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    for (h, head_probs) in probs.iter().enumerate() {
        let (qc, kc, vc) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..t {
            let p = &head_probs[i];
            let go = dctx.slice(s![i, h * dh..(h + 1) * dh]);
            let dp: Vec<f64> = (0..=i)
                .map(|j| go.dot(&qkv.slice(s![j, vc..vc + dh])))
                .collect();
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                {
                    let mut dv = dqkv.slice_mut(s![j, vc..vc + dh]);
                    dv.scaled_add(p[j], &go);
                }
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                dqkv.slice_mut(s![i, qc..qc + dh])
                    .scaled_add(ds, &qkv.slice(s![j, kc..kc + dh]));
                dqkv.slice_mut(s![j, kc..kc + dh])
                    .scaled_add(ds, &qkv.slice(s![i, qc..qc + dh]));
            }
        }
    }
    dqkv
}

impl Block {
    fn new(d: usize, n_layers: usize, rng: &mut Rng) -> Self {
        let resid_std = 0.02 / (2.0 * n_layers as f64).sqrt();
        Self {
            ln1: LayerNorm::new(d),
            qkv: Linear::new(d, 3 * d, 0.02, rng),
            attn_out: Linear::new(d, d, resid_std, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, 4 * d, 0.02, rng),
            fc2: Linear::new(4 * d, d, resid_std, rng),
        }
    }

    fn forward(&self, x: &Array2<f64>, heads: usize, drop: &mut Dropout) -> (Array2<f64>, BlockTrace) {
        let (a, ln1) = self.ln1.forward(&x.view());
        let qkv = self.qkv.forward(&a.view());
        let (ctx, probs) = attention(&qkv, heads);
        let mut att = self.attn_out.forward(&ctx.view());
        let drop1 = drop.apply(&mut att);
        let x2 = x + &att;
        let (b, ln2) = self.ln2.forward(&x2.view());
        let pre = self.fc1.forward(&b.view());
        let act = nn::gelu(&pre);
        let mut m = self.fc2.forward(&act.view());
        let drop2 = drop.apply(&mut m);
        let out = x2 + &m;
        let trace = BlockTrace {
            ln1,
            a,
            qkv,
            probs,
            ctx,
            drop1,
            ln2,
            b,
            pre,
            act,
            drop2,
        };
        (out, trace)
    }

    fn backward(&mut self, tr: &BlockTrace, dout: &Array2<f64>) -> Array2<f64> {
        let dm = masked(dout, &tr.drop2);
        let dact = self.fc2.backward(&tr.act.view(), &dm);
        let dpre = nn::gelu_backward(&tr.pre, &dact);
        let db = self.fc1.backward(&tr.b.view(), &dpre);
        let dx2 = dout + &self.ln2.backward(&tr.ln2, &db);
        let datt = masked(&dx2, &tr.drop1);
        let dctx = self.attn_out.backward(&tr.ctx.view(), &datt);
        let dqkv = attention_backward(&tr.qkv, &tr.probs, &dctx);
        let da = self.qkv.backward(&tr.a.view(), &dqkv);
        dx2 + &self.ln1.backward(&tr.ln1, &da)
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ln1.visit(&format!("{p}.ln1"), f);
        self.qkv.visit(&format!("{p}.qkv"), f);
        self.attn_out.visit(&format!("{p}.attn_out"), f);
        self.ln2.visit(&format!("{p}.ln2"), f);
        self.fc1.visit(&format!("{p}.fc1"), f);
        self.fc2.visit(&format!("{p}.fc2"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_mut(&format!("{p}.ln1"), f);
        self.qkv.visit_mut(&format!("{p}.qkv"), f);
        self.attn_out.visit_mut(&format!("{p}.attn_out"), f);
        self.ln2.visit_mut(&format!("{p}.ln2"), f);
        self.fc1.visit_mut(&format!("{p}.fc1"), f);
        self.fc2.visit_mut(&format!("{p}.fc2"), f);
    }
}

/// Which training phase produced a set of weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PhaseTag {
    Fresh,
    Pretrained,
    Sft(String),
}

impl std::fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PhaseTag::Fresh => f.write_str("fresh"),
            PhaseTag::Pretrained => f.write_str("pretrained"),
            PhaseTag::Sft(d) => write!(f, "sft:{d}"),
        }
    }
}

impl std::str::FromStr for PhaseTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(PhaseTag::Fresh),
            "pretrained" => Ok(PhaseTag::Pretrained),
            _ => s
                .strip_prefix("sft:")
                .map(|d| PhaseTag::Sft(d.to_string()))
                .ok_or_else(|| Error::Incompatible(format!("unknown phase tag `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: LmConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub d_code: usize,
    pub phase: PhaseTag,
    pub seed: u64,
    pub step: u64,
    /// Rows for specials and text ids.
    pub token_embedding: Param,
    pub position_embedding: Param,
    pub projector: Projector,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

struct EmbedTrace {
    ts_positions: Vec<usize>,
    projector: Option<ProjectorTrace>,
    drop: Option<Array2<f64>>,
}

/// Everything a backward pass needs.
pub struct ForwardTrace {
    ids: Vec<TokenId>,
    embed: EmbedTrace,
    blocks: Vec<BlockTrace>,
    final_ln: LayerNormCache,
    hidden: Array2<f64>,
    pub logits: Array2<f64>,
}

impl DecoderModel {
    pub fn new(config: &LmConfig, vocab: &Vocabulary, d_code: usize, seed: u64) -> Result<Self> {
        config.validate(d_code)?;
        let mut rng = rng_for(seed, "lm/init");
        let d = config.d_model;
        let n_embedded = vocab.first_ts_id() as usize;
        Ok(Self {
            config: config.clone(),
            vocab_size: vocab.size(),
            vocab_hash: vocab.hash(),
            d_code,
            phase: PhaseTag::Fresh,
            seed,
            step: 0,
            token_embedding: Param::normal(n_embedded, d, 0.02, &mut rng, false),
            position_embedding: Param::normal(config.context_window, d, 0.01, &mut rng, false),
            projector: Projector::new(&config.projector_hidden, &mut rng),
            blocks: (0..config.n_layers)
                .map(|_| Block::new(d, config.n_layers, &mut rng))
                .collect(),
            final_norm: LayerNorm::new(d),
            head: Linear::new(d, vocab.size(), 0.02, &mut rng),
        })
    }

    pub fn num_embedded(&self) -> usize {
        self.token_embedding.value.nrows()
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_hash != vocab.hash() || self.vocab_size != vocab.size() {
            return Err(Error::Incompatible(format!(
                "model vocabulary {} does not match corpus vocabulary {}",
                short(&self.vocab_hash),
                short(&vocab.hash())
            )));
        }
        Ok(())
    }

    fn embed(
        &self,
        ids: &[TokenId],
        table: &CodebookTable,
        drop: &mut Dropout,
    ) -> Result<(Array2<f64>, EmbedTrace)> {
        let t = ids.len();
        if t > self.config.context_window {
            return Err(Error::Argument(format!(
                "sequence of length {t} exceeds context window {}",
                self.config.context_window
            )));
        }
        let d = self.config.d_model;
        let n_embedded = self.num_embedded() as TokenId;
        let mut x = Array2::zeros((t, d));
        let mut ts_positions = Vec::new();
        for (i, &id) in ids.iter().enumerate() {
            if id < n_embedded {
                x.row_mut(i).assign(&self.token_embedding.value.row(id as usize));
            } else {
                ts_positions.push(i);
            }
        }
        let projector = if ts_positions.is_empty() {
            None
        } else {
            let mut rows = Array2::zeros((ts_positions.len(), table.d_code()));
            for (r, &i) in ts_positions.iter().enumerate() {
                rows.row_mut(r).assign(&table.row(ids[i])?);
            }
            let (out, trace) = self.projector.forward(rows);
            for (r, &i) in ts_positions.iter().enumerate() {
                x.row_mut(i).assign(&out.row(r));
            }
            Some(trace)
        };
        x += &self.position_embedding.value.slice(s![..t, ..]);
        let drop_mask = drop.apply(&mut x);
        Ok((
            x,
            EmbedTrace {
                ts_positions,
                projector,
                drop: drop_mask,
            },
        ))
    }

    /// Input vectors of every position (eval mode).
    pub fn embed_hybrid(&self, prompt: &PromptSequence, table: &CodebookTable) -> Result<Array2<f64>> {
        let mut off = Dropout { rate: 0.0, rng: None };
        Ok(self.embed(&prompt.ids, table, &mut off)?.0)
    }

    /// Full forward pass. Passing an RNG enables dropout.
    pub fn trace(
        &self,
        ids: &[TokenId],
        table: &CodebookTable,
        rng: Option<&mut Rng>,
    ) -> Result<ForwardTrace> {
        let mut drop = Dropout {
            rate: self.config.dropout,
            rng,
        };
        let (mut x, embed) = self.embed(ids, table, &mut drop)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, tr) = block.forward(&x, self.config.n_heads, &mut drop);
            blocks.push(tr);
            x = out;
        }
        let (hidden, final_ln) = self.final_norm.forward(&x.view());
        let logits = self.head.forward(&hidden.view());
        Ok(ForwardTrace {
            ids: ids.to_vec(),
            embed,
            blocks,
            final_ln,
            hidden,
            logits,
        })
    }

    /// Per-position logits over the full vocabulary (eval mode).
    pub fn forward(&self, prompt: &PromptSequence, table: &CodebookTable) -> Result<Array2<f64>> {
        Ok(self.trace(&prompt.ids, table, None)?.logits)
    }

    /// Final-layer-norm outputs of every position (eval mode).
    pub fn hidden_states(&self, prompt: &PromptSequence, table: &CodebookTable) -> Result<Array2<f64>> {
        Ok(self.trace(&prompt.ids, table, None)?.hidden)
    }

    /// Accumulate parameter gradients for `dlogits`.
    pub fn backward(&mut self, trace: &ForwardTrace, dlogits: &Array2<f64>) {
        let dh = self.head.backward(&trace.hidden.view(), dlogits);
        let mut dx = self.final_norm.backward(&trace.final_ln, &dh);
        for (block, tr) in self.blocks.iter_mut().zip(&trace.blocks).rev() {
            dx = block.backward(tr, &dx);
        }
        let dx = masked(&dx, &trace.embed.drop);
        let t = dx.nrows();
        {
            let mut pos = self.position_embedding.grad.slice_mut(s![..t, ..]);
            pos += &dx;
        }
        let n_embedded = self.num_embedded() as TokenId;
        for (i, &id) in trace.ids.iter().enumerate() {
            if id < n_embedded {
                let mut row = self.token_embedding.grad.row_mut(id as usize);
                row += &dx.row(i);
            }
        }
        if let Some(ptrace) = &trace.embed.projector {
            let rows = trace.embed.ts_positions.iter().map(|&i| dx.row(i));
            let mut dproj = Array2::zeros((trace.embed.ts_positions.len(), dx.ncols()));
            for (r, row) in rows.enumerate() {
                dproj.row_mut(r).assign(&row);
            }
            self.projector.backward(ptrace, dproj);
        }
    }

    /// Autoregressive loss of one prompt (trailing padding trimmed), with
    /// `scale * grad` accumulated into the parameters.
    pub fn accumulate(
        &mut self,
        prompt: &PromptSequence,
        table: &CodebookTable,
        scale: f64,
        rng: Option<&mut Rng>,
    ) -> Result<f64> {
        let n = prompt.unpadded_len();
        let trimmed = PromptSequence {
            ids: prompt.ids[..n].to_vec(),
            loss_mask: prompt.loss_mask[..n].to_vec(),
            segment_tags: prompt.segment_tags[..n].to_vec(),
        };
        let trace = self.trace(&trimmed.ids, table, rng)?;
        let (loss, mut dlogits) = ar_loss_grad(&trace.logits, &trimmed)?;
        dlogits *= scale;
        self.backward(&trace, &dlogits);
        Ok(loss)
    }

    /// Greedy decoding after `prefix`; time-series ids are never emitted.
    pub fn generate(
        &self,
        prefix: &PromptSequence,
        table: &CodebookTable,
        vocab: &Vocabulary,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        if max_new == 0 {
            return Err(Error::Argument("max_new must be at least 1".into()));
        }
        let mut ids = prefix.ids[..prefix.unpadded_len()].to_vec();
        let mut out = Vec::new();
        let allowed = vocab.first_ts_id() as usize;
        while out.len() < max_new {
            if ids.len() >= self.config.context_window {
                return Err(Error::TruncatedGeneration { partial: out });
            }
            let logits = self.trace(&ids, table, None)?.logits;
            let last = logits.row(logits.nrows() - 1);
            let next = argmax(&last.slice(s![..allowed])) as TokenId;
            out.push(next);
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let file = LmFile {
            format: LM_FORMAT.into(),
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            vocab_size: self.vocab_size,
            n_embedded: self.num_embedded(),
            d_code: self.d_code,
            phase: self.phase.to_string(),
            seed: self.seed,
            step: self.step,
            tensors: nn::export_params(self),
        };
        checkpoint::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: LmFile = checkpoint::read_json(path)?;
        if file.format != LM_FORMAT {
            return Err(Error::Incompatible(format!(
                "{}: unknown model format `{}`",
                path.display(),
                file.format
            )));
        }
        file.config.validate(file.d_code)?;
        if file.n_embedded > file.vocab_size {
            return Err(Error::Incompatible(format!("{}: inconsistent vocabulary sizes", path.display())));
        }
        let mut rng = rng_for(file.seed, "lm/load");
        let d = file.config.d_model;
        let mut model = Self {
            config: file.config.clone(),
            vocab_size: file.vocab_size,
            vocab_hash: file.vocab_hash,
            d_code: file.d_code,
            phase: file.phase.parse()?,
            seed: file.seed,
            step: file.step,
            token_embedding: Param::zeros(file.n_embedded, d, false),
            position_embedding: Param::zeros(file.config.context_window, d, false),
            projector: Projector::new(&file.config.projector_hidden, &mut rng),
            blocks: (0..file.config.n_layers)
                .map(|_| Block::new(d, file.config.n_layers, &mut rng))
                .collect(),
            final_norm: LayerNorm::new(d),
            head: Linear::new(d, file.vocab_size, 0.0, &mut rng),
        };
        nn::import_params(&mut model, &file.tensors)?;
        Ok(model)
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

const LM_FORMAT: &str = "tsgen-decoder/1";

#[derive(Serialize, Deserialize)]
struct LmFile {
    format: String,
    config: LmConfig,
    vocab_hash: String,
    vocab_size: usize,
    n_embedded: usize,
    d_code: usize,
    phase: String,
    seed: u64,
    step: u64,
    tensors: Vec<NamedTensor>,
}

impl Parameters for DecoderModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for (i, l) in self.projector.layers.iter().enumerate() {
            l.visit(&format!("projector.{i}"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.final_norm.visit("final_norm", f);
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        for (i, l) in self.projector.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("projector.{i}"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.final_norm.visit_mut("final_norm", f);
        self.head.visit_mut("head", f);
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean next-token negative log-likelihood over positions with mask 1.
pub fn ar_loss(logits: &Array2<f64>, prompt: &PromptSequence) -> Result<f64> {
    Ok(ar_loss_grad(logits, prompt)?.0)
}

/// Loss and its gradient with respect to the logits.
pub fn ar_loss_grad(logits: &Array2<f64>, prompt: &PromptSequence) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != prompt.len() {
        return Err(Error::Argument(format!(
            "{} logit rows for a prompt of length {}",
            logits.nrows(),
            prompt.len()
        )));
    }
    let targets: Vec<usize> = (1..prompt.len()).filter(|&i| prompt.loss_mask[i] == 1).collect();
    if targets.is_empty() {
        return Err(Error::DegenerateSample);
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for &i in &targets {
        let row = logits.row(i - 1);
        let target = prompt.ids[i] as usize;
        let mut p: Vec<f64> = row.to_vec();
        let lse = nn::log_sum_exp(&p);
        loss += lse - row[target];
        nn::softmax_in_place(&mut p);
        p[target] -= 1.0;
        let mut d = dlogits.row_mut(i - 1);
        d += &(Array1::from(p) / n);
    }
    Ok((loss / n, dlogits))
}

/// Mean of `hidden` over its first `len` rows.
pub fn mean_pool(hidden: &ArrayView2<f64>, len: usize) -> Array1<f64> {
    hidden
        .slice(s![..len.max(1).min(hidden.nrows()), ..])
        .mean_axis(Axis(0))
        .expect("at least one row")
}
