//! Generative sequential recommendation over multi-codebook item tokens.
//!
//! Items are tokenized into unordered token sets by parallel quantization
//! experts ([`mpq`]); an encoder-decoder model ([`seqmodel`]) predicts the
//! next item's tokens; decoding picks the most confident codebook at every
//! step and prunes inconsistent paths ([`decode`]); reward-driven group
//! policy optimization ([`grpo`], [`rewards`]) refines the decoder, with
//! per-layer simulated precision control ([`ladq`]); [`dataeval`] covers
//! data handling, leave-one-out evaluation and experiment orchestration.

pub mod checkpoint;
pub mod dataeval;
pub mod decode;
pub mod error;
pub mod grpo;
pub mod ladq;
pub mod mpq;
pub mod numerics;
pub mod rewards;
pub mod rng;
pub mod seqmodel;

pub use error::{Error, Result};
