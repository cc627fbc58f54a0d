//! Dense-retrieval knowledge distillation with dark examples.
//!
//! A cross-encoder teacher is distilled into a dual-encoder student. The
//! distillation candidates for each query are its hard negatives plus two
//! kinds of "dark" passages of intermediate relevance: the positive
//! concatenated with each negative, and the positive with a fraction of its
//! tokens masked. Instances are ranked once by teacher confidence and each
//! epoch distils only over a shrinking high-confidence prefix.
//!
//! Everything runs in double precision on a toy architecture so gradients can
//! be checked against finite differences.

pub mod corpus;
pub mod dark;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod text;

pub use error::{Error, Result};
