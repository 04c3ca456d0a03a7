//! Training dynamics of Muon and gradient-descent-family optimizers on a linear
//! softmax associative memory with a hierarchical frequency spectrum.

pub mod cli;
pub mod harness;
pub mod linalg;
pub mod memory_model;
pub mod optimizers;
pub mod structured;
pub mod theory;

pub use harness::{FitResult, Record, SweepResult, Trajectory};
pub use linalg::{matrix_sign, svd, DenseMatrix, SignMethod, SvdResult};
pub use memory_model::{build_spec, EmbeddingBasis, KnowledgeSpec, MemoryState, ProbabilityTable, Spectrum};
pub use optimizers::{Engine, Optimizer, OptimizerKind, Probes, RunConfig};
