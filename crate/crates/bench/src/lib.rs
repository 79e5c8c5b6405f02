//! Benchmarks for the `mlvamp` kernels live in `benches/`.
