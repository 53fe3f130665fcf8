//! Federated, privacy-preserving cross-domain sequential recommendation.
//!
//! The pipeline has two stages. Stage 1 runs per client: item text
//! embeddings are perturbed and nearest-neighbour replaced ([`privacy`]),
//! pooled and clustered by the server ([`federation`]), and the returned
//! centroid embeddings are distilled into a frozen self-attentive sequential
//! recommender ([`seqrec`], [`fkd`]). Stage 2 projects user and item
//! representations into the soft-prompt space of a small decoder language
//! model and tunes it for next-item prediction ([`promptrec`]).

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod federation;
pub mod fkd;
pub mod numerics;
pub mod privacy;
pub mod promptrec;
pub mod seqrec;

pub use error::{Error, Result};
