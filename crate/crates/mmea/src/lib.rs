//! Multi-modal entity alignment between two knowledge graphs.
//!
//! Entities are embedded jointly from graph structure (a two-layer GCN
//! over the union graph), image features, relation and attribute count
//! features, and optionally surface forms. Channels are fused by a
//! trainable softmax-weighted concatenation, trained against in-batch
//! pivots with a neighbourhood-component-analysis objective, and ranked at
//! inference time with CSLS-rescaled cosine similarity. Training pivots
//! can be labelled (semi-supervised), induced from visual similarity
//! (unsupervised), or grown during training by probation-gated mutual
//! nearest neighbours.

pub mod alignloss;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod inference;
pub mod kgdata;
pub mod numcore;
pub mod rng;
pub mod seeding;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
