//! Criterion benchmarks for the numerical kernels of `mdsm-core`; see `benches/`.
