//! CPU reference implementation of hierarchical block-sparse attention with
//! entmax chunk routing.
//!
//! The library computes causal attention in two stages. Stage 0 compresses
//! every full key chunk into a single summary vector via a local softmax
//! pooled by a learned summary query. Stage 1 scores those summaries against
//! each query and routes through alpha-entmax, producing a sparse set of
//! active chunks per (query, kv-head). Stage 2 runs block-sparse softmax
//! attention over the active chunks plus a local diagonal branch, with a
//! routing-derived additive bias that is exactly equivalent to a mixture
//! prior over routed and local tokens.
//!
//! Everything is computed in f64 with deterministic accumulation order; a
//! separate f32 path exists only for wall-clock benchmarking. Analytic
//! reverse-mode gradients are provided for the whole pipeline and checked
//! against central finite differences.
//!
//! Data parallelism over (query, kv-head) rows uses rayon when the default
//! `parallel` feature is enabled; disabling it yields a dependency-free
//! sequential build with bit-identical results.

pub mod attend;
pub mod bench32;
pub mod diagnostics;
pub mod entmax;
mod error;
pub mod grad;
pub mod numkit;
mod parallel;
pub mod route;
pub mod summarize;

pub use error::{Error, Result};
pub use numkit::{DenseMatrix, Rng};
pub use summarize::AttnConfig;
