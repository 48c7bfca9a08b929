//! Desk-scale language model pipeline: train a byte-level BPE tokenizer
//! with control tokens, build length/modality-conditioned instruction
//! corpora, train a small decoder-only transformer with hand-written exact
//! gradients, sample length-controlled prompts from it, distill training
//! pairs from a teacher (HTTP endpoint or built-in grammar), and score the
//! results.
//!
//! Every stage is exposed as a library API; `examples/` holds one runnable
//! program per capability and the `slmforge` binary wires the same calls
//! into a CLI.

pub mod corpus;
pub mod distiller;
pub mod evaluator;
pub mod math;
pub mod model;
pub mod runconfig;
pub mod sampler;
pub mod tokenizer;
pub mod trainer;
