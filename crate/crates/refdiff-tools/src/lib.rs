//! Operator tooling around `refdiff-core`: run configuration, dataset files,
//! checkpoints, the frozen-recognizer OCR backend, the evaluation harness,
//! schedule plots, and the CLI fronting all of it.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ocr;
pub mod plot;
pub mod stack;
