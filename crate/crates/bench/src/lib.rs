//! Criterion benchmarks for the dfc-dit kernels live under benches/.
