//! Subset-contrastive multi-view graph embedding.
//!
//! Each view's samples are linked into a KNN graph and encoded by a two-layer
//! GATv2 stack; per-view latents are sum-pooled into a joint space (missing
//! samples contribute zeros) and decoded back per view. Training draws two
//! overlapping sample subsets per epoch and contrasts neighborhood averages of
//! shared samples against cross-subset exclusive samples. The learned joint
//! space is clustered with Louvain and scored with ARI, AMI and the logrank
//! test.

pub mod bench;
pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gat;
pub mod graph;
pub mod io;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod subset;
pub mod training;

pub use error::{Result, SconeError};
