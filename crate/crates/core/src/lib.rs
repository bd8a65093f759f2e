//! Neural response selection for ensembles of dialogue agents.
//!
//! A feed-forward scorer ranks candidate responses produced by several
//! dialogue agents, given the recent conversation history and the user's
//! query. Training is weakly supervised: the only signal is a human-written
//! gold response per turn, enforced through a margin ranking loss, and runs
//! as a three-stage curriculum (gold histories, agent histories, then
//! scheduled sampling over the model's own selections).
//!
//! Module map:
//!
//! - [`corpus`]: dataset model, JSONL I/O, instance building, splits and a
//!   synthetic ensemble generator.
//! - [`embed`]: tokenizer, embedding providers, pooling and feature vectors.
//! - [`model`]: the scoring network with exact gradients and checkpoints.
//! - [`optim`]: hinge loss, ADAM with freeze masks, learning-rate schedule.
//! - [`train`]: the curriculum phases and rolling histories.
//! - [`select`]: inference, cosine baselines, evaluation and statistics.

pub mod corpus;
pub mod embed;
pub mod model;
pub mod optim;
pub mod select;
pub mod train;

pub(crate) mod hash;
