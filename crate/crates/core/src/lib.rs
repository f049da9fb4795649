//! Generative time-series classification.
//!
//! Multivariate series are cut into patches, encoded by a temporal
//! convolutional autoencoder and quantized against a per-domain codebook.
//! The resulting codes are spliced into a templated instruction prompt
//! and fed to a small decoder-only transformer whose time-series tokens are
//! embedded through an alignment projector. The decoder is pre-trained
//! autoregressively across domains, fine-tuned per domain on the answer
//! segment only, and classifies by greedily generating a label sentence.
//!
//! Module map:
//!
//! * [`dataset`]: corpus model, ingestion, normalization, splits, synthetic domains
//! * [`vq`]: patch embedding, codebooks, quantization, tokenizer training
//! * [`prompt`]: unified vocabulary and prompt construction
//! * [`lm`]: hybrid-embedding decoder, autoregressive loss, greedy decoding
//! * [`train`]: pre-training, fine-tuning, evaluation settings, ablation grids
//! * [`eval`]: label parsing, metrics, token statistics, embedding export

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod lm;
pub mod nn;
pub mod optim;
pub mod prompt;
pub mod seed;
pub mod text;
pub mod train;
pub mod vq;

pub use dataset::{Corpus, CorpusSplit, DomainData, DomainSpec, LabelDef, TimeSeriesInstance};
pub use error::{Error, Result};
pub use eval::{MetricsReport, TokenFrequencyTable};
pub use lm::{DecoderModel, LmConfig};
pub use prompt::{PromptMode, PromptSequence, SegmentTag, TokenId, Vocabulary};
pub use train::{RunRecord, TrainConfig};
pub use vq::{Codebook, Tokenizer, VqConfig, VqEncoderDecoder, VqLossReport};
