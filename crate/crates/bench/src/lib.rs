//! Criterion benchmarks for dealflow-core; see `benches/`.
