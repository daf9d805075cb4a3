//! Benchmarks for the packing pipeline live in `benches/`.
