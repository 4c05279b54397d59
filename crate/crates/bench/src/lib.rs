//! Criterion benchmarks for the eqkd pipeline stages; see `benches/`.
