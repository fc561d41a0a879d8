//! Criterion benchmarks for `vgpo-core` live under `benches/`.
