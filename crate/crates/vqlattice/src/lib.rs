//! vqlattice: a desk-scale sequence-transducer toolkit.
//!
//! The crate trains small RNN transducers whose prediction networks expose
//! discrete, mergeable state — either through vector-quantized LSTM states
//! or through a fixed two-label context — and decodes them with an
//! alignment-length synchronous beam search that recombines hypotheses into
//! weighted acyclic lattices. On top of the lattices sit the usual quality
//! tooling: density, oracle error rate, n-best extraction, margin pruning,
//! and n-gram rescoring.
//!
//! Start with the runnable examples (`cargo run --example lattice_generation`
//! and friends); the `vqlattice` binary wraps the same pipeline behind
//! `gen-data` / `train` / `decode` / `eval` / `rescore` subcommands.

pub mod error;
pub mod decoder;
pub mod lattice;
pub mod loss;
pub mod model;
pub mod lm;
pub mod numerics;
pub mod pipeline;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
