//! Criterion benchmarks for the volex kernels live in `benches/`.
