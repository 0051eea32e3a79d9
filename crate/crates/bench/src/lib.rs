//! Benchmarks for the solver kernels live in `benches/`.
