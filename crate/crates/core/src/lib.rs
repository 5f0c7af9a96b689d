//! Multi-shot track verification as a sequential decision process.
//!
//! An agent looks at one pair of frame embeddings at a time, drawn from two
//! tracks, and either commits to `Same`/`Different` or asks for another pair
//! (`Unsure`). The Q function is a small fully connected network trained with
//! deep Q-learning; evaluation ranks a gallery by the terminal Q-value margin
//! and reports CMC curves together with the number of images consumed.

pub mod commands;
pub mod config;
pub mod embedding;
pub mod env;
pub mod error;
pub mod eval;
pub mod format;
pub mod qnet;
pub mod replay;
pub mod seed;
pub mod synth;
pub mod train;

pub use embedding::{Dataset, FeatureVector, Split, SplitRule, Track};
pub use env::{Action, AgentState, Episode, EpisodeConfig, EpisodeOutcome, Label, PairOrder};
pub use error::{Error, Result};
pub use eval::{CmcCurve, RankingResult};
pub use qnet::{QNetworkParams, QValues};
pub use synth::{CorruptionMode, SynthConfig};
pub use train::{TrainConfig, TrainingLog};
