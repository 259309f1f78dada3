//! Criterion benchmarks for the sampler kernels; see `benches/`.
