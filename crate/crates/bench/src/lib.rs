//! Criterion benchmarks for the model; see `benches/model.rs`.
