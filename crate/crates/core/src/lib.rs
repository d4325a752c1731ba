//! Graph-augmented query–ad relevance models over a bipartite click graph.
//!
//! Three fusion levels share one encoder stack: [`models::node`] aggregates
//! encoded neighbors per tower, [`models::edge`] encodes context edges in
//! one tower, and [`models::token`] interleaves graph attention over CLS
//! rows with per-node text layers. [`pretrain`] and [`distill`] cover
//! graph-aware warm-up and the neighbor-free student for long-tail
//! entities; [`harness`] holds the synthetic data and the training loop with its metric.

pub mod corpus;
pub mod distill;
pub mod error;
pub mod graph;
pub mod harness;
pub mod models;
pub mod nn;
pub mod pretrain;

pub use error::{Error, Result};
