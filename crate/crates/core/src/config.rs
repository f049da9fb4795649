//! Declarative run configuration.
//!
//! A config is resolved in three layers: built-in defaults, a TOML file, then
//! `key=value` overrides with dotted keys. Every key of the file and of the
//! overrides must exist in the defaults and carry a compatible type.

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::dataset::{SyntheticSpec, Waveform};
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::train::{EvalConfig, GridBase, GridConfig, TrainConfig};
use crate::vq::VqConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus directory; an empty string means "not set".
    pub root: String,
    /// Domains written by `gen-data`.
    pub synthetic: Vec<SyntheticSpec>,
    /// Share of each training split used by `finetune`.
    pub fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: String::new(),
            synthetic: desk_synthetic_specs(),
            fraction: 1.0,
        }
    }
}

/// Checkpoints consumed by later verbs. Empty strings mean "not set".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Directory holding `<domain>.json` tokenizer checkpoints.
    pub tokenizers: String,
    /// Decoder checkpoint used as the starting point or the evaluated model.
    pub model: String,
    /// Domain to fine-tune or evaluate; empty means every domain.
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub tokenizer: VqConfig,
    pub model: LmConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub grid: GridConfig,
    pub checkpoints: CheckpointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            tokenizer: VqConfig::default(),
            model: LmConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::sft_default(),
            eval: EvalConfig::default(),
            grid: GridConfig::default(),
            checkpoints: CheckpointConfig::default(),
        }
    }
}

/// Three waveform domains of 16 tokens each with distinct shapes.
pub fn desk_synthetic_specs() -> Vec<SyntheticSpec> {
    use Waveform::*;
    let mut a = SyntheticSpec::new("alpha", &[Sine, Square]);
    a.length = 64;
    a.channels = 1;
    a.patch_size = 4;
    let mut b = SyntheticSpec::new("beta", &[Sine, Sawtooth, NoiseBurst]);
    b.length = 128;
    b.channels = 2;
    b.patch_size = 8;
    let mut c = SyntheticSpec::new("gamma", &[Square, Sawtooth, Sine]);
    c.length = 96;
    c.channels = 2;
    c.patch_size = 6;
    vec![a, b, c]
}

impl RunConfig {
    /// Apply the run seed to every phase and validate all sections.
    pub fn finalize(mut self) -> Result<Self> {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.pretrain.phase = crate::train::Phase::Pretrain;
        self.finetune.phase = crate::train::Phase::Sft;
        self.tokenizer.validate()?;
        self.model.validate(self.tokenizer.d_code)?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(Error::Config("data.fraction: must lie in (0, 1]".into()));
        }
        if self.eval.max_new_tokens == 0 {
            return Err(Error::Config("eval.max_new_tokens: must be at least 1".into()));
        }
        Ok(self)
    }

    pub fn grid_base(&self) -> GridBase {
        GridBase {
            tokenizer: self.tokenizer.clone(),
            model: self.model.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            eval: self.eval.clone(),
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn defaults_value() -> Value {
    Value::try_from(RunConfig::default()).expect("defaults serialize")
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Coerce `v` to the type of `template`, or report the key.
fn coerce(key: &str, template: &Value, v: Value) -> Result<Value> {
    match (template, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Table(t), Value::Table(given)) => {
            let mut out = t.clone();
            for (k, val) in given {
                let path = if key.is_empty() { k.clone() } else { format!("{key}.{k}") };
                let Some(tpl) = t.get(&k) else {
                    return Err(Error::Config(format!("unknown key `{path}`")));
                };
                out.insert(k, coerce(&path, tpl, val)?);
            }
            Ok(Value::Table(out))
        }
        (tpl, v) if std::mem::discriminant(tpl) == std::mem::discriminant(&v) => Ok(v),
        (tpl, v) => Err(Error::Config(format!(
            "`{key}` expects {}, got {}",
            type_name(tpl),
            type_name(&v)
        ))),
    }
}

/// Parse an override value; bare words become strings.
fn parse_override_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Resolve defaults, file contents and overrides into a validated config.
pub fn resolve(file_text: &str, overrides: &[String]) -> Result<RunConfig> {
    let defaults = defaults_value();
    let file: toml::Table = toml::from_str(file_text)
        .map_err(|e| Error::Config(format!("config file does not parse: {e}")))?;
    let mut merged = coerce("", &defaults, Value::Table(file))?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
        let key = key.trim();
        let parts: Vec<&str> = key.split('.').collect();
        let mut tpl = &defaults;
        let mut slot = &mut merged;
        for (i, part) in parts.iter().enumerate() {
            let (Some(t), Value::Table(s)) = (tpl.get(part), slot) else {
                return Err(Error::Config(format!("unknown key `{key}`")));
            };
            tpl = t;
            if i + 1 == parts.len() {
                let mut value = parse_override_value(raw.trim());
                if matches!(tpl, Value::String(_)) && !matches!(value, Value::String(_)) {
                    value = Value::String(raw.trim().to_string());
                }
                s.insert(part.to_string(), coerce(key, tpl, value)?);
                break;
            }
            slot = s.get_mut(*part).expect("merged mirrors defaults");
        }
    }
    let cfg: RunConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
    cfg.finalize()
}
