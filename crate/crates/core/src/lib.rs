//! Desk-scale toolkit for vision reflection experiments.
//!
//! The crate works entirely on exported model artifacts:
//!
//! * [`store`] reads and validates embedding matrices (EMB1), vocabularies and
//!   top-k prediction files.
//! * [`reverse`] maps vision-token embeddings back to their closest text tokens.
//! * [`connector`] builds the training-free key/value connector from a vocabulary.
//! * [`verifier`] defines the verifier interface plus scripted, stochastic and
//!   remote implementations.
//! * [`reflection`] runs the uncertainty-gated verification loop over top-k
//!   candidates.
//! * [`evaluation`] computes accuracies and binary discriminatory metrics.
//! * [`simulate`] generates seeded synthetic prediction sets.

pub mod connector;
pub mod evaluation;
pub mod reflection;
pub mod reverse;
pub mod simulate;
pub mod store;
pub mod verifier;

pub use connector::{ConnectorOutput, ConnectorWeights, KeyStrategy};
pub use evaluation::{BinaryReport, ConfusionCounts, EvalReport};
pub use reflection::{PromptTemplate, ReflectionPolicy, ReflectionTrace};
pub use reverse::{KeyTermOptions, KeyTermReport, VisionTokenBlock};
pub use store::{Dataset, EmbeddingMatrix, LabelMode, PredictionSet, Vocabulary};
pub use verifier::{Answer, Verdict, Verifier, VerifierQuery};
