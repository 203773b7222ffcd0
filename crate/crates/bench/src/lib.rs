//! Criterion benchmarks for the deconvseg kernels live in `benches/`.
