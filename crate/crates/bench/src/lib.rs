//! Criterion benchmarks for the `pmkd` kernels live in `benches/`.
