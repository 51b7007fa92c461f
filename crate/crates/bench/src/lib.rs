//! Criterion benchmarks for the tensor kernels and noisy inference; see `benches/`.
