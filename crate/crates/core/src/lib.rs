//! Artist-conditioned lyric line generation.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation, Adam and gradient checking.
//! * [`corpus`]: lyric ingestion, tokenisation, vocabularies and stratified splits.
//! * [`dsp`]: WAV decoding, 10-second clip segmentation, STFT and log-mel spectrograms.
//! * [`spectro`]: the spectrogram artist classifier and per-artist embedding extraction.
//! * [`vae`]: the conditioned sentence VAE (bi-LSTM encoder, LSTM decoder).
//! * [`ngram`]: interpolated Kneser-Ney trigram models and NLL cross-matrices.
//! * [`eval`]: text style classifier, diversity metrics, run aggregation, annotation tooling.
//! * [`checkpoint`], [`config`], [`pipeline`]: persistence and end-to-end orchestration.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod ngram;
pub mod nn;
pub mod pipeline;
pub mod spectro;
pub mod vae;

pub use autodiff::{Adam, Graph, ParamStore, Tensor, Var};
pub use corpus::{ArtistId, Corpus, EncodedLine, Line, Vocabulary};
pub use error::{Error, Result};
pub use ngram::{KneserNeyModel, NllMatrix};
pub use spectro::{ArtistEmbeddingMatrix, EmbeddingProvenance};
pub use vae::{ConditioningMode, VaeConfig, VaeModel};
pub use checkpoint::VaeCheckpoint;
pub use config::{RunConfig, RunManifest};
pub use eval::EvalReport;
pub use pipeline::Pipeline;
