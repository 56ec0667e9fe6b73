//! Few-shot whole-slide image subtyping on frozen vision-language features.
//!
//! The crate is organised around the pipeline it implements:
//!
//! * [`corpus`] builds a deterministic synthetic world (frozen text encoder,
//!   class prototypes, slide grids with tumor masks) and reads/writes the
//!   on-disk tile feature store.
//! * [`zeroshot`] turns prompt templates into class embeddings, ranks prompt
//!   groups, classifies tiles by cosine similarity and derives tile
//!   pseudo-labels from slide labels.
//! * [`model`] is the trainable network: a spatial aggregation module over the
//!   tile grid plus a learnable-context prompt head.
//! * [`training`] holds the three-term loss, warm-up schedule, pseudo-label
//!   refresh and the k-shot sampler.
//! * [`mil`] provides gated-attention and mean-pool MIL comparators.
//! * [`metrics`] implements BACC, tile AUC, DICE and the paired t-test.
//! * [`harness`] orchestrates the k-shot x repeat protocol and writes reports.

pub mod corpus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod nn;
pub mod optim;
pub mod text;
pub mod training;
pub mod zeroshot;

pub use error::{Error, Result};
