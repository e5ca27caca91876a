//! Criterion benchmarks for the hot paths: channel synthesis, matrix
//! multiply, encoder forward and backward, and one training step. Run with
//! `cargo bench -p csibert-bench`.
