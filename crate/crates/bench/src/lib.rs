//! Criterion benchmarks for smoothcache live in `benches/`.
