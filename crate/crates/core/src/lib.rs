//! Loop-circuit reasoning probes: the looped Boolean circuit, the hitting-time
//! geometry of its computation graph, Aitchison-valued probes, GCN hypothesis
//! classes, optimal transport on finite metrics, and the generalization
//! experiments built from them.

pub mod aitchison;
pub mod circuit;
pub mod error;
pub mod experiment;
pub mod graph_metric;
pub mod probe;
pub mod rng;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
