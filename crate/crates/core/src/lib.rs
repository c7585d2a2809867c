//! Feedback-guided iterative inpainting for symbolic piano music.
//!
//! The crate covers the whole pipeline: MIDI I/O, REMI tokenization,
//! dataset sampling, a small reverse-mode autodiff engine, the inpainting,
//! feedback and evaluator transformers, their training loops, the iterative
//! refinement engine and the evaluation harness.

pub mod corpus;
pub mod engine;
pub mod eval;
pub mod midi;
pub mod models;
pub mod parallel;
pub mod remi;
pub mod tensor;
pub mod train;
