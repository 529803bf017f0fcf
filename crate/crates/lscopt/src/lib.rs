//! Local-search reinforcement learning and classical heuristics for
//! combinatorial optimization on weighted graphs.
//!
//! The crate covers the full pipeline: instance generation and TSPLIB
//! parsing, reversible-action environments for maximum k-cut and TSP, a
//! self-contained autodiff core with the graph encoder / readout / Q /
//! proposal networks built on it, an N-step Q-learning training loop with
//! action elimination, classical baselines (greedy local search, 2-opt,
//! farthest insertion, exact brute force), and an evaluation harness that
//! emits CSV/JSON artifacts. The `lscopt` binary wires these into
//! `generate`, `train`, `solve`, `baseline`, and `eval` subcommands.

pub mod error;
pub mod rng;

pub mod gen;
pub mod graph;
pub mod tsplib;

pub mod env;
pub mod solution;

pub mod model;
pub mod tensor;

pub mod agent;
pub mod baselines;
pub mod eval;

pub use error::{Error, Result};
pub use graph::Graph;
pub use solution::{Action, ActionKind, Problem, Solution};
