//! Roll-in/roll-out cost-sensitive training of GRU encoder-decoders, with a
//! maximum-likelihood baseline for comparison.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`params`], [`gradcheck`]: dense `f64` math with
//!   a reverse-mode tape and finite-difference verification.
//! - [`corpus`], [`metrics`]: vocabularies, batching and BLEU.
//! - [`model`]: bidirectional GRU encoder and GRU decoder.
//! - [`policy`], [`searnn`]: roll-in/roll-out policies, cost vectors and the
//!   cost-sensitive losses.
//! - [`optim`], [`checkpoint`], [`trainer`], [`config`]: optimisation, run
//!   configuration and persistence.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod layer_checks;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod policy;
pub mod searnn;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use corpus::{SentencePair, TokenId, TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};
pub use error::{Error, ErrorKind, Result};
pub use model::{DecoderState, EncoderOutput, ModelDims, ScoreVector, Seq2Seq};
pub use params::{Gradients, ParamId, ParamStore};
pub use policy::{PolicyKind, Trajectory};
pub use searnn::{CostVector, LossKind, Sampling, SearnnConfig, TargetDistribution};
pub use tensor::Tensor;
