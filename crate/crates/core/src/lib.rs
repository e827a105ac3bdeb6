//! Survival-supervised clustering of censored lifetimes.
//!
//! The pipeline grows a decision tree whose splits maximize the Kuiper
//! divergence between the children's Kaplan-Meier curves, gated by a
//! Bonferroni-corrected significance level. Leaves are then joined into a
//! complete graph weighted by pairwise Kuiper p-values, balanced with
//! Sinkhorn-Knopp and partitioned with the Markov Cluster algorithm.

pub mod clustering;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod io;
pub mod kaplan_meier;
mod linalg;
pub mod synth;
pub mod tree;
pub mod two_sample;

pub use error::{Error, Result};
