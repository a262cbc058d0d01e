//! Criterion benchmarks for the sdze kernels; see `benches/kernels.rs`.
