//! Criterion benchmarks for seqnet live in `benches/`.
